#pragma once

#include <stdexcept>

namespace attnsim {

// Abstract machine for the execution model. Rates are in the cost units used
// by the work decomposition: compute in head_dim-vector MACs per time unit,
// memory in elements per time unit. The defaults are calibrated to an
// A100-like balance point (attention-kernel effective throughput, 108 SMs),
// not measured hardware; only ratios matter downstream.
struct GpuSpec {
    int num_sms = 108;
    double compute_rate_per_sm = 0.25;
    double mem_bandwidth_total = 108.0;
    // An SM can issue only its slice of HBM traffic; saturating the device
    // takes ~num_sms memory-active SMs.
    double mem_bandwidth_per_sm = 1.2;
    // Each prefill CTA beyond the first on an SM degrades that SM's memory
    // delivery by this factor (tensor-core and L1 pressure on co-located
    // decodes).
    double mem_interference = 0.25;
    int max_ctas_per_sm = 4;
    double shared_mem_per_sm = 167936.0;  // bytes

    double aggregate_compute_rate() const { return compute_rate_per_sm * num_sms; }

    void validate() const {
        if (num_sms < 1 || max_ctas_per_sm < 1)
            throw std::invalid_argument("GpuSpec: num_sms and max_ctas_per_sm must be >= 1");
        if (!(compute_rate_per_sm > 0) || !(mem_bandwidth_total > 0) ||
            !(mem_bandwidth_per_sm > 0) || !(shared_mem_per_sm > 0))
            throw std::invalid_argument("GpuSpec: rates and capacities must be positive");
        if (mem_interference < 0)
            throw std::invalid_argument("GpuSpec: mem_interference must be >= 0");
    }
};

}  // namespace attnsim
