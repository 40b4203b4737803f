#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnsim/gpu.hpp"
#include "attnsim/serving.hpp"
#include "attnsim/types.hpp"

// Declarative experiment configs. Unknown keys are rejected so a typo fails
// loudly instead of silently running defaults; the resolved config reparses
// to an equal config (round-trip checked in tests).

namespace attnsim {

using json = nlohmann::json;

namespace cfgdetail {

inline void check_keys(const json& obj, const std::string& section,
                       std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) throw ConfigError(section + ": expected an object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed)
            if (it.key() == k) ok = true;
        if (!ok) throw ConfigError(section + ": unknown key '" + it.key() + "'");
    }
}

template <typename T>
void get_to(const json& obj, const char* key, T& out) {
    if (obj.contains(key)) {
        try {
            obj.at(key).get_to(out);
        } catch (const json::exception& e) {
            throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
        }
    }
}

}  // namespace cfgdetail

struct VerifyConfig {
    long instances = 1000;
    long split_instances = 200;
    long max_m = 64;
    long max_n = 2048;
    std::vector<int> dims{4, 8, 64};
    std::vector<long> tiles{1, 8, 16, 64, 128};
    double tolerance = 1e-10;
    long causality_instances = 50;
    bool inject_mask_off_by_one = false;

    static VerifyConfig from_json(const json& j) {
        cfgdetail::check_keys(j, "verify",
                              {"instances", "split_instances", "max_m", "max_n", "dims", "tiles",
                               "tolerance", "causality_instances", "inject_mask_off_by_one"});
        VerifyConfig c;
        cfgdetail::get_to(j, "instances", c.instances);
        cfgdetail::get_to(j, "split_instances", c.split_instances);
        cfgdetail::get_to(j, "max_m", c.max_m);
        cfgdetail::get_to(j, "max_n", c.max_n);
        cfgdetail::get_to(j, "dims", c.dims);
        cfgdetail::get_to(j, "tiles", c.tiles);
        cfgdetail::get_to(j, "tolerance", c.tolerance);
        cfgdetail::get_to(j, "causality_instances", c.causality_instances);
        cfgdetail::get_to(j, "inject_mask_off_by_one", c.inject_mask_off_by_one);
        return c;
    }
    json to_json() const {
        return {{"instances", instances},
                {"split_instances", split_instances},
                {"max_m", max_m},
                {"max_n", max_n},
                {"dims", dims},
                {"tiles", tiles},
                {"tolerance", tolerance},
                {"causality_instances", causality_instances},
                {"inject_mask_off_by_one", inject_mask_off_by_one}};
    }
};

struct KernelSimConfig {
    std::string experiment = "chunk_sweep";  // chunk_sweep | grid
    std::vector<std::string> strategies{"serial", "streams", "cta", "warp", "intra", "smaware"};
    std::vector<std::string> policies{"5050", "prop"};
    int segments = 16;
    // chunk_sweep
    long prompt_tokens = 16384;
    long chunk_size = 512;
    std::vector<long> decode_batch_sizes{54, 55};
    long decode_context = 16384;
    // grid: last chunk of each context, decodes at the same context
    std::vector<long> context_lens;
    std::vector<long> chunk_sizes;
    int split_wave_cap = 0;  // 0 keeps the decomposition default

    static KernelSimConfig from_json(const json& j) {
        cfgdetail::check_keys(j, "kernel_sim",
                              {"experiment", "strategies", "policies", "segments",
                               "prompt_tokens", "chunk_size", "decode_batch_sizes",
                               "decode_context", "context_lens", "chunk_sizes",
                               "split_wave_cap"});
        KernelSimConfig c;
        cfgdetail::get_to(j, "experiment", c.experiment);
        cfgdetail::get_to(j, "strategies", c.strategies);
        cfgdetail::get_to(j, "policies", c.policies);
        cfgdetail::get_to(j, "segments", c.segments);
        cfgdetail::get_to(j, "prompt_tokens", c.prompt_tokens);
        cfgdetail::get_to(j, "chunk_size", c.chunk_size);
        cfgdetail::get_to(j, "decode_batch_sizes", c.decode_batch_sizes);
        cfgdetail::get_to(j, "decode_context", c.decode_context);
        cfgdetail::get_to(j, "context_lens", c.context_lens);
        cfgdetail::get_to(j, "chunk_sizes", c.chunk_sizes);
        cfgdetail::get_to(j, "split_wave_cap", c.split_wave_cap);
        if (c.experiment != "chunk_sweep" && c.experiment != "grid")
            throw ConfigError("kernel_sim.experiment must be 'chunk_sweep' or 'grid'");
        return c;
    }
    json to_json() const {
        return {{"experiment", experiment},
                {"strategies", strategies},
                {"policies", policies},
                {"segments", segments},
                {"prompt_tokens", prompt_tokens},
                {"chunk_size", chunk_size},
                {"decode_batch_sizes", decode_batch_sizes},
                {"decode_context", decode_context},
                {"context_lens", context_lens},
                {"chunk_sizes", chunk_sizes},
                {"split_wave_cap", split_wave_cap}};
    }
};

struct MicrobenchConfig {
    std::vector<long> compute_iters{25, 50, 100, 200, 400};
    long array_len = 1024;
    std::vector<std::string> strategies{"serial", "streams", "cta", "warp", "intra", "smaware"};
    int segments = 16;

    static MicrobenchConfig from_json(const json& j) {
        cfgdetail::check_keys(j, "microbench",
                              {"compute_iters", "array_len", "strategies", "segments"});
        MicrobenchConfig c;
        cfgdetail::get_to(j, "compute_iters", c.compute_iters);
        cfgdetail::get_to(j, "array_len", c.array_len);
        cfgdetail::get_to(j, "strategies", c.strategies);
        cfgdetail::get_to(j, "segments", c.segments);
        return c;
    }
    json to_json() const {
        return {{"compute_iters", compute_iters},
                {"array_len", array_len},
                {"strategies", strategies},
                {"segments", segments}};
    }
};

struct DistConfig {
    std::string kind = "uniform";  // fixed | uniform | lognormal
    double a = 512;
    double b = 2048;

    TokenDist to_dist() const {
        TokenDist d;
        if (kind == "fixed") d.kind = TokenDist::Kind::Fixed;
        else if (kind == "uniform") d.kind = TokenDist::Kind::Uniform;
        else if (kind == "lognormal") d.kind = TokenDist::Kind::LogNormal;
        else throw ConfigError("dist.kind must be fixed, uniform or lognormal");
        d.a = a;
        d.b = b;
        return d;
    }
    static DistConfig from_json(const json& j, const std::string& section) {
        cfgdetail::check_keys(j, section, {"kind", "a", "b"});
        DistConfig c;
        cfgdetail::get_to(j, "kind", c.kind);
        cfgdetail::get_to(j, "a", c.a);
        cfgdetail::get_to(j, "b", c.b);
        c.to_dist();  // validates kind
        return c;
    }
    json to_json() const { return {{"kind", kind}, {"a", a}, {"b", b}}; }
};

struct ServeConfig {
    std::vector<double> qps{1.0};
    long num_requests = 512;
    DistConfig prefill_dist{"uniform", 512, 2048};
    DistConfig decode_dist{"uniform", 16, 128};
    std::vector<std::string> policies{"prefill_prioritized", "chunked_hybrid"};
    long chunk_size = 512;
    long max_batch = 256;
    long token_budget = 4096;
    std::vector<bool> fused{false, true};
    double w_fixed = 1.0e6;
    double w_tok = 11000.0;
    long reference_decode_batch = 60;
    long reference_decode_context = 16384;
    double reference_ms = 50.0;
    std::vector<double> stall_thresholds_ms{200.0, 500.0};

    static ServeConfig from_json(const json& j) {
        cfgdetail::check_keys(
            j, "serve",
            {"qps", "num_requests", "prefill_dist", "decode_dist", "policies", "chunk_size",
             "max_batch", "token_budget", "fused", "w_fixed", "w_tok", "reference_decode_batch",
             "reference_decode_context", "reference_ms", "stall_thresholds_ms"});
        ServeConfig c;
        cfgdetail::get_to(j, "qps", c.qps);
        cfgdetail::get_to(j, "num_requests", c.num_requests);
        if (j.contains("prefill_dist"))
            c.prefill_dist = DistConfig::from_json(j.at("prefill_dist"), "serve.prefill_dist");
        if (j.contains("decode_dist"))
            c.decode_dist = DistConfig::from_json(j.at("decode_dist"), "serve.decode_dist");
        cfgdetail::get_to(j, "policies", c.policies);
        cfgdetail::get_to(j, "chunk_size", c.chunk_size);
        cfgdetail::get_to(j, "max_batch", c.max_batch);
        cfgdetail::get_to(j, "token_budget", c.token_budget);
        cfgdetail::get_to(j, "fused", c.fused);
        cfgdetail::get_to(j, "w_fixed", c.w_fixed);
        cfgdetail::get_to(j, "w_tok", c.w_tok);
        cfgdetail::get_to(j, "reference_decode_batch", c.reference_decode_batch);
        cfgdetail::get_to(j, "reference_decode_context", c.reference_decode_context);
        cfgdetail::get_to(j, "reference_ms", c.reference_ms);
        cfgdetail::get_to(j, "stall_thresholds_ms", c.stall_thresholds_ms);
        return c;
    }
    json to_json() const {
        return {{"qps", qps},
                {"num_requests", num_requests},
                {"prefill_dist", prefill_dist.to_json()},
                {"decode_dist", decode_dist.to_json()},
                {"policies", policies},
                {"chunk_size", chunk_size},
                {"max_batch", max_batch},
                {"token_budget", token_budget},
                {"fused", fused},
                {"w_fixed", w_fixed},
                {"w_tok", w_tok},
                {"reference_decode_batch", reference_decode_batch},
                {"reference_decode_context", reference_decode_context},
                {"reference_ms", reference_ms},
                {"stall_thresholds_ms", stall_thresholds_ms}};
    }
};

struct ExperimentConfig {
    GpuSpec gpu;
    ModelShape shape;
    uint64_t seed = 42;
    std::string out = "out.csv";
    std::optional<VerifyConfig> verify;
    std::optional<KernelSimConfig> kernel_sim;
    std::optional<MicrobenchConfig> microbench;
    std::optional<ServeConfig> serve;

    static ExperimentConfig from_json(const json& j) {
        cfgdetail::check_keys(
            j, "config", {"gpu", "shape", "seed", "out", "verify", "kernel_sim", "microbench",
                          "serve"});
        ExperimentConfig c;
        if (j.contains("gpu")) {
            const auto& g = j.at("gpu");
            cfgdetail::check_keys(g, "gpu",
                                  {"num_sms", "compute_rate_per_sm", "mem_bandwidth_total",
                                   "mem_bandwidth_per_sm", "mem_interference",
                                   "max_ctas_per_sm", "shared_mem_per_sm"});
            cfgdetail::get_to(g, "num_sms", c.gpu.num_sms);
            cfgdetail::get_to(g, "compute_rate_per_sm", c.gpu.compute_rate_per_sm);
            cfgdetail::get_to(g, "mem_bandwidth_total", c.gpu.mem_bandwidth_total);
            cfgdetail::get_to(g, "mem_bandwidth_per_sm", c.gpu.mem_bandwidth_per_sm);
            cfgdetail::get_to(g, "mem_interference", c.gpu.mem_interference);
            cfgdetail::get_to(g, "max_ctas_per_sm", c.gpu.max_ctas_per_sm);
            cfgdetail::get_to(g, "shared_mem_per_sm", c.gpu.shared_mem_per_sm);
            c.gpu.validate();
        }
        if (j.contains("shape")) {
            const auto& s = j.at("shape");
            cfgdetail::check_keys(s, "shape",
                                  {"num_q_heads", "num_kv_heads", "head_dim", "scale"});
            cfgdetail::get_to(s, "num_q_heads", c.shape.num_q_heads);
            cfgdetail::get_to(s, "num_kv_heads", c.shape.num_kv_heads);
            cfgdetail::get_to(s, "head_dim", c.shape.head_dim);
            cfgdetail::get_to(s, "scale", c.shape.scale);
            c.shape.validate();
        }
        cfgdetail::get_to(j, "seed", c.seed);
        cfgdetail::get_to(j, "out", c.out);
        if (j.contains("verify")) c.verify = VerifyConfig::from_json(j.at("verify"));
        if (j.contains("kernel_sim"))
            c.kernel_sim = KernelSimConfig::from_json(j.at("kernel_sim"));
        if (j.contains("microbench"))
            c.microbench = MicrobenchConfig::from_json(j.at("microbench"));
        if (j.contains("serve")) c.serve = ServeConfig::from_json(j.at("serve"));
        return c;
    }

    json to_json() const {
        json j;
        j["gpu"] = {{"num_sms", gpu.num_sms},
                    {"compute_rate_per_sm", gpu.compute_rate_per_sm},
                    {"mem_bandwidth_total", gpu.mem_bandwidth_total},
                    {"mem_bandwidth_per_sm", gpu.mem_bandwidth_per_sm},
                    {"mem_interference", gpu.mem_interference},
                    {"max_ctas_per_sm", gpu.max_ctas_per_sm},
                    {"shared_mem_per_sm", gpu.shared_mem_per_sm}};
        j["shape"] = {{"num_q_heads", shape.num_q_heads},
                      {"num_kv_heads", shape.num_kv_heads},
                      {"head_dim", shape.head_dim},
                      {"scale", shape.scale}};
        j["seed"] = seed;
        j["out"] = out;
        if (verify) j["verify"] = verify->to_json();
        if (kernel_sim) j["kernel_sim"] = kernel_sim->to_json();
        if (microbench) j["microbench"] = microbench->to_json();
        if (serve) j["serve"] = serve->to_json();
        return j;
    }

    static ExperimentConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file: " + path);
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw ConfigError(std::string("config parse error in ") + path + ": " + e.what());
        }
        return from_json(j);
    }
};

}  // namespace attnsim
