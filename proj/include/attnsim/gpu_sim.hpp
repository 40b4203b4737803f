#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "attnsim/gpu.hpp"
#include "attnsim/rng.hpp"
#include "attnsim/types.hpp"
#include "attnsim/work_decomp.hpp"

// Discrete-event simulation of a multi-SM GPU draining CtaTask sets under a
// two-resource fluid contention model. At any instant a resident task drains
// compute at compute_rate_per_sm shared equally among the tasks on its SM
// that still have compute left, and memory at an equal share of the global
// bandwidth capped per task (a lone CTA cannot saturate HBM). A task holds
// its slot until both resources reach zero. This is a model, not a
// measurement: it is the smallest machine that exhibits wave quantization,
// stragglers, barrier serialization and the benefit of SM-level co-location.

namespace attnsim {

enum class Strategy {
    Serial,
    StreamsParallel,
    CtaParallel,
    WarpParallel,
    IntraThread,
    SmAware,
};

enum class SmPolicy { FiftyFifty, Proportional };

struct ExecutionStrategy {
    Strategy kind = Strategy::Serial;
    int segments = 16;  // IntraThread barrier slices
    SmPolicy policy = SmPolicy::FiftyFifty;

    static ExecutionStrategy serial() { return {Strategy::Serial}; }
    static ExecutionStrategy streams() { return {Strategy::StreamsParallel}; }
    static ExecutionStrategy cta_parallel() { return {Strategy::CtaParallel}; }
    static ExecutionStrategy warp_parallel() { return {Strategy::WarpParallel}; }
    static ExecutionStrategy intra_thread(int segments = 16) {
        return {Strategy::IntraThread, segments};
    }
    static ExecutionStrategy sm_aware(SmPolicy policy = SmPolicy::FiftyFifty) {
        return {Strategy::SmAware, 16, policy};
    }

    std::string name() const {
        switch (kind) {
            case Strategy::Serial: return "serial";
            case Strategy::StreamsParallel: return "streams";
            case Strategy::CtaParallel: return "cta";
            case Strategy::WarpParallel: return "warp";
            case Strategy::IntraThread: return "intra";
            case Strategy::SmAware: return "smaware";
        }
        return "?";
    }
    std::string policy_name() const {
        if (kind != Strategy::SmAware) return "-";
        return policy == SmPolicy::FiftyFifty ? "5050" : "prop";
    }
};

struct KernelLaunch {
    std::vector<CtaTask> tasks;  // submission order
    double shared_mem_per_cta = 0;
    int stream_id = 0;
    int warps_per_cta = 4;
    int ctas_per_sm = 0;  // occupancy requested by the tile config; 0 = machine max
};

// Counters of the SM-aware scheduling scheme: one ticket counter per SM plus
// global per-op CTA-assignment counters.
struct SchedulerState {
    std::vector<long> sm_ctr;
    std::array<long, 2> cta_assign{0, 0};
    long prefill_ratio = 1;
    long decode_ratio = 1;
    long prefill_ctas = 0;
    long decode_ctas = 0;
};

inline SchedulerState make_scheduler_state(SmPolicy policy, long prefill_ctas, long decode_ctas,
                                           int num_sms) {
    SchedulerState st;
    st.sm_ctr.assign(num_sms, 0);
    st.prefill_ctas = prefill_ctas;
    st.decode_ctas = decode_ctas;
    if (policy == SmPolicy::FiftyFifty) {
        st.prefill_ratio = 1;
        st.decode_ratio = 1;
    } else {
        const long g = std::gcd(prefill_ctas, decode_ctas);
        st.prefill_ratio = g > 0 ? prefill_ctas / g : (prefill_ctas > 0 ? 1 : 0);
        st.decode_ratio = g > 0 ? decode_ctas / g : (decode_ctas > 0 ? 1 : 0);
        if (st.prefill_ratio == 0 && st.decode_ratio == 0) st.prefill_ratio = 1;
    }
    return st;
}

struct SmAwarePick {
    OpKind op;
    long cta_id;  // dense per-op index, in claim order
};

// Runtime operation binding: the ticket from the SM's counter selects the op,
// the per-op counter claims the next CTA id, and an exhausted pool switches
// to the other op.
inline std::optional<SmAwarePick> sm_aware_assign(int sm_id, SchedulerState& st) {
    const long ratio = st.prefill_ratio + st.decode_ratio;
    const long ticket = st.sm_ctr[sm_id]++ % ratio;
    OpKind op = ticket < st.prefill_ratio ? OpKind::Prefill : OpKind::Decode;
    const auto total = [&](OpKind o) {
        return o == OpKind::Prefill ? st.prefill_ctas : st.decode_ctas;
    };
    long cta = st.cta_assign[static_cast<int>(op)]++;
    if (cta >= total(op)) {
        op = op == OpKind::Prefill ? OpKind::Decode : OpKind::Prefill;
        cta = st.cta_assign[static_cast<int>(op)]++;
        if (cta >= total(op)) return std::nullopt;
    }
    return SmAwarePick{op, cta};
}

struct TraceEvent {
    double time;
    int sm;
    char kind;  // 'A' assign, 'C' complete
    int task;
    OpKind op;
};

struct SmAssignment {
    double time;
    int sm;
    OpKind op;
    int task;
    long prefill_pool_before;
    long decode_pool_before;
};

struct SmMix {
    double time;
    int prefill_resident;
    int decode_resident;
};

struct SimResult {
    double makespan = 0;
    std::array<double, 2> per_op_finish{0, 0};  // indexed by OpKind
    double compute_utilization = 0;
    double bandwidth_utilization = 0;
    long waves_used = 0;
    long quantized_ctas = 0;
    std::vector<SmAssignment> assignments;
    std::vector<std::vector<SmMix>> per_sm_colocation_trace;
    std::vector<TraceEvent> trace;
    double compute_drained = 0;
    double memory_drained = 0;
    double total_compute_work = 0;
    double total_memory_work = 0;
};

struct SimOptions {
    bool record_trace = true;
    bool randomized_dispatch = false;
};

// Lower bound assuming perfect overlap: both resources fully busy.
inline double oracle_runtime(const GpuSpec& gpu, const std::vector<KernelLaunch>& launches) {
    double compute = 0, memory = 0;
    for (const auto& l : launches)
        for (const auto& t : l.tasks) {
            compute += t.compute_work;
            memory += t.memory_work;
        }
    if (compute == 0 && memory == 0)
        throw std::invalid_argument("oracle_runtime: no work");
    return std::max(compute / gpu.aggregate_compute_rate(), memory / gpu.mem_bandwidth_total);
}

// Barrier-sliced fusion of a task pair: slice k of both ops may overlap, the
// next slice starts when both finish. Realized as one schedulable unit whose
// combined per-slice works drain in lockstep.
struct IntraThreadTask {
    double slice_compute = 0;
    double slice_memory = 0;
    int segments = 1;
};

inline IntraThreadTask intra_thread_semantics(const CtaTask& a, const CtaTask& b, int segments) {
    if (segments < 1) throw std::invalid_argument("intra_thread_semantics: segments < 1");
    IntraThreadTask f;
    f.segments = segments;
    f.slice_compute = (a.compute_work + b.compute_work) / segments;
    f.slice_memory = (a.memory_work + b.memory_work) / segments;
    return f;
}

namespace detail {

struct Unit {
    std::vector<int> task_ids;  // indices into the flattened task table
    int launch = 0;
    OpKind op = OpKind::Prefill;  // op of first task; fused units carry both
    bool fused_intra = false;
    int quanta = 4;
    double slice_c = 0, slice_m = 0;
    int slices_total = 1;
    // runtime
    int slices_done = 0;
    double rem_c = 0, rem_m = 0;
    int sm = -1;
    int group = -1;
    double rate_c = 0, rate_m = 0;
};

struct SlotGroup {
    int quanta = 0;
    int members_left = 0;
    int sm = -1;
};

struct FlatTask {
    CtaTask task;
    int launch;
};

class SimEngine {
public:
    SimEngine(const GpuSpec& gpu, const std::vector<KernelLaunch>& launches,
              const ExecutionStrategy& strategy, uint64_t seed, const SimOptions& opt)
        : gpu_(gpu), strategy_(strategy), opt_(opt), rng_(seed) {
        gpu_.validate();
        if (launches.empty()) throw std::invalid_argument("simulate: no launches");
        warps_ = launches[0].warps_per_cta;
        for (const auto& l : launches) {
            if (l.warps_per_cta != warps_)
                throw ConfigError("simulate: launches disagree on warps_per_cta");
            if (l.shared_mem_per_cta > gpu.shared_mem_per_sm)
                throw ConfigError("simulate: CTA shared memory exceeds SM capacity");
            for (const auto& t : l.tasks)
                tasks_.push_back({t, static_cast<int>(&l - launches.data())});
        }
        if (tasks_.empty()) throw std::invalid_argument("simulate: no tasks");
        if (strategy.kind == Strategy::WarpParallel && launches.size() >= 2) {
            double combined = launches[0].shared_mem_per_cta + launches[1].shared_mem_per_cta;
            if (combined > gpu.shared_mem_per_sm)
                throw ConfigError("simulate: fused warp-parallel CTA exceeds SM shared memory");
        }
        for (const auto& ft : tasks_)
            if (ft.task.is_virtual) virtual_decode_ = true;
        dispatched_task_.assign(tasks_.size(), 0);
        int slots = gpu_.max_ctas_per_sm;
        for (const auto& l : launches)
            if (l.ctas_per_sm > 0) slots = std::min(slots, l.ctas_per_sm);
        slots_per_sm_ = slots;
        build_units();
        build_queues(launches);
        result_.per_sm_colocation_trace.resize(gpu_.num_sms);
        sm_free_.assign(gpu_.num_sms, slots_per_sm_ * warps_);
        sm_resident_.resize(gpu_.num_sms);
        sm_mix_.assign(gpu_.num_sms, {0, 0});
        n_compute_.assign(gpu_.num_sms, 0);
        n_mem_.assign(gpu_.num_sms, 0);
        n_prefill_comp_.assign(gpu_.num_sms, 0);
        sm_mem_rate_.assign(gpu_.num_sms, 0.0);
        count_waves();
        while (active_kernel_ < kernel_units_.size() && kernel_units_[active_kernel_].empty())
            active_kernel_++;
    }

    SimResult run() {
        dispatch_fill();
        size_t guard = 0;
        const size_t guard_max = 50'000'000;
        while (completed_ < units_.size()) {
            if (++guard > guard_max) throw std::logic_error("simulate: event budget exceeded");
            if (resident_.empty()) {
                if (!dispatch_fill())
                    throw std::logic_error("simulate: stalled with pending work");
                continue;
            }
            step();
            dispatch_fill();
        }
        finalize();
        return std::move(result_);
    }

private:
    void build_units() {
        const auto add_single = [&](int task_id) {
            const auto& ft = tasks_[task_id];
            Unit u;
            u.task_ids = {task_id};
            u.launch = ft.launch;
            u.op = ft.task.op;
            u.quanta = std::min(ft.task.slot_quanta, warps_);
            u.slice_c = ft.task.compute_work;
            u.slice_m = ft.task.memory_work;
            u.slices_total = 1;
            units_.push_back(u);
            return static_cast<int>(units_.size() - 1);
        };

        std::vector<int> ppool, dpool;
        for (size_t i = 0; i < tasks_.size(); ++i)
            (tasks_[i].task.op == OpKind::Prefill ? ppool : dpool).push_back((int)i);
        result_.total_compute_work = 0;
        result_.total_memory_work = 0;
        for (const auto& ft : tasks_) {
            result_.total_compute_work += ft.task.compute_work;
            result_.total_memory_work += ft.task.memory_work;
        }

        switch (strategy_.kind) {
            case Strategy::WarpParallel: {
                const size_t pairs = std::min(ppool.size(), dpool.size());
                for (size_t i = 0; i < pairs; ++i) {
                    int a = add_single(ppool[i]);
                    int b = add_single(dpool[i]);
                    paired_.push_back({a, b});
                }
                for (size_t i = pairs; i < ppool.size(); ++i)
                    paired_.push_back({add_single(ppool[i]), -1});
                for (size_t i = pairs; i < dpool.size(); ++i)
                    paired_.push_back({add_single(dpool[i]), -1});
                break;
            }
            case Strategy::IntraThread: {
                const size_t pairs = std::min(ppool.size(), dpool.size());
                for (size_t i = 0; i < pairs; ++i) {
                    const auto& a = tasks_[ppool[i]].task;
                    const auto& b = tasks_[dpool[i]].task;
                    IntraThreadTask fused = intra_thread_semantics(a, b, strategy_.segments);
                    Unit u;
                    u.task_ids = {ppool[i], dpool[i]};
                    u.launch = tasks_[ppool[i]].launch;
                    u.op = OpKind::Prefill;
                    u.fused_intra = true;
                    u.quanta = warps_;
                    u.slice_c = fused.slice_compute;
                    u.slice_m = fused.slice_memory;
                    u.slices_total = fused.segments;
                    units_.push_back(u);
                    fused_queue_.push_back((int)units_.size() - 1);
                }
                for (size_t i = pairs; i < ppool.size(); ++i)
                    fused_queue_.push_back(add_single(ppool[i]));
                for (size_t i = pairs; i < dpool.size(); ++i)
                    fused_queue_.push_back(add_single(dpool[i]));
                break;
            }
            default: {
                unit_of_task_.assign(tasks_.size(), -1);
                for (size_t i = 0; i < tasks_.size(); ++i)
                    unit_of_task_[i] = add_single((int)i);
                break;
            }
        }
    }

    void build_queues(const std::vector<KernelLaunch>& launches) {
        switch (strategy_.kind) {
            case Strategy::Serial:
            case Strategy::StreamsParallel: {
                kernel_units_.resize(launches.size());
                kernel_left_.assign(launches.size(), 0);
                for (size_t i = 0; i < tasks_.size(); ++i) {
                    kernel_units_[tasks_[i].launch].push_back(unit_of_task_[i]);
                    kernel_left_[tasks_[i].launch]++;
                }
                kernel_next_.assign(launches.size(), 0);
                break;
            }
            case Strategy::CtaParallel: {
                for (size_t i = 0; i < tasks_.size(); ++i)
                    if (tasks_[i].task.op == OpKind::Prefill)
                        merged_.push_back(unit_of_task_[i]);
                for (size_t i = 0; i < tasks_.size(); ++i)
                    if (tasks_[i].task.op == OpKind::Decode)
                        merged_.push_back(unit_of_task_[i]);
                break;
            }
            case Strategy::SmAware: {
                for (size_t i = 0; i < tasks_.size(); ++i) {
                    if (tasks_[i].task.op == OpKind::Prefill)
                        sm_pool_[0].push_back(unit_of_task_[i]);
                    else
                        sm_pool_[1].push_back(unit_of_task_[i]);
                }
                sched_ = make_scheduler_state(strategy_.policy, (long)sm_pool_[0].size(),
                                              (long)sm_pool_[1].size(), gpu_.num_sms);
                break;
            }
            default:
                break;  // WarpParallel / IntraThread prebuilt their queues
        }
        if (opt_.randomized_dispatch) shuffle_queues();
    }

    void shuffle_queues() {
        auto shuf = [&](std::vector<int>& v) {
            for (size_t i = v.size(); i > 1; --i)
                std::swap(v[i - 1], v[rng_.next_u64() % i]);
        };
        for (auto& q : kernel_units_) shuf(q);
        shuf(merged_);
        shuf(sm_pool_[0]);
        shuf(sm_pool_[1]);
        shuf(fused_queue_);
    }

    void count_waves() {
        long full_equiv = 0;
        switch (strategy_.kind) {
            case Strategy::WarpParallel:
            case Strategy::IntraThread: {
                long p = 0, d = 0;
                for (const auto& ft : tasks_) (ft.task.op == OpKind::Prefill ? p : d)++;
                full_equiv = std::max(p, d);
                break;
            }
            default: {
                long quanta = 0;
                for (const auto& ft : tasks_) quanta += std::min(ft.task.slot_quanta, warps_);
                full_equiv = ceil_div(quanta, (long)warps_);
                break;
            }
        }
        result_.waves_used = ceil_div(full_equiv, (long)gpu_.num_sms);
        result_.quantized_ctas = full_equiv % gpu_.num_sms;
    }

    long pool_remaining(OpKind op) const {
        switch (strategy_.kind) {
            case Strategy::SmAware:
                return std::max<long>(0, (long)sm_pool_[op == OpKind::Prefill ? 0 : 1].size() -
                                             sched_.cta_assign[op == OpKind::Prefill ? 0 : 1]);
            default: {
                // Undispatched tasks of this op, strategy-agnostic view.
                long n = 0;
                for (size_t i = 0; i < tasks_.size(); ++i)
                    if (tasks_[i].task.op == op && !dispatched_task_[i]) n++;
                return n;
            }
        }
    }

    // Places a slot group on `sm`. Units must fit in the free quanta.
    void place(int sm, const std::vector<int>& unit_ids, int group_quanta) {
        groups_.push_back({group_quanta, (int)unit_ids.size(), sm});
        const int gid = (int)groups_.size() - 1;
        sm_free_[sm] -= group_quanta;
        const long p_before = pool_remaining(OpKind::Prefill);
        const long d_before = pool_remaining(OpKind::Decode);
        for (int uid : unit_ids) {
            Unit& u = units_[uid];
            u.sm = sm;
            u.group = gid;
            u.rem_c = u.slice_c;
            u.rem_m = u.slice_m;
            u.slices_done = 0;
            resident_.push_back(uid);
            sm_resident_[sm].push_back(uid);
            for (int tid : u.task_ids) {
                dispatched_task_[tid] = true;
                const OpKind op = tasks_[tid].task.op;
                result_.assignments.push_back({now_, sm, op, tid, p_before, d_before});
                if (op == OpKind::Prefill)
                    sm_mix_[sm].first++;
                else
                    sm_mix_[sm].second++;
                if (opt_.record_trace)
                    result_.trace.push_back({now_, sm, 'A', tid, op});
            }
        }
        if (opt_.record_trace)
            result_.per_sm_colocation_trace[sm].push_back(
                {now_, sm_mix_[sm].first, sm_mix_[sm].second});
    }

    // Next fill for an SM with `free` quanta, honoring strategy semantics.
    // Returns false when nothing from this strategy fits.
    bool next_fill(int sm, int free) {
        switch (strategy_.kind) {
            case Strategy::Serial: {
                // Only the active kernel dispatches; it advances on full completion.
                if (active_kernel_ >= kernel_units_.size()) return false;
                auto& q = kernel_units_[active_kernel_];
                if (kernel_next_[active_kernel_] >= q.size()) return false;
                const int uid = q[kernel_next_[active_kernel_]];
                if (units_[uid].quanta > free) return false;
                kernel_next_[active_kernel_]++;
                place(sm, {uid}, units_[uid].quanta);
                return true;
            }
            case Strategy::StreamsParallel: {
                const size_t n = kernel_units_.size();
                for (size_t probe = 0; probe < n; ++probe) {
                    const size_t k = (stream_rr_ + probe) % n;
                    if (kernel_next_[k] >= kernel_units_[k].size()) continue;
                    const int uid = kernel_units_[k][kernel_next_[k]];
                    if (units_[uid].quanta > free) continue;
                    kernel_next_[k]++;
                    stream_rr_ = (k + 1) % n;
                    place(sm, {uid}, units_[uid].quanta);
                    return true;
                }
                return false;
            }
            case Strategy::CtaParallel: {
                if (merged_next_ >= merged_.size()) return false;
                const int uid = merged_[merged_next_];
                if (units_[uid].quanta > free) return false;
                merged_next_++;
                place(sm, {uid}, units_[uid].quanta);
                return true;
            }
            case Strategy::WarpParallel: {
                if (pair_next_ >= paired_.size()) return false;
                if (warps_ > free) return false;  // fused slot occupies one CTA slot
                auto [a, b] = paired_[pair_next_++];
                std::vector<int> ids{a};
                if (b >= 0) ids.push_back(b);
                place(sm, ids, warps_);
                return true;
            }
            case Strategy::IntraThread: {
                if (fused_next_ >= fused_queue_.size()) return false;
                const int uid = fused_queue_[fused_next_];
                if (units_[uid].quanta > free) return false;
                fused_next_++;
                place(sm, {uid}, units_[uid].quanta);
                return true;
            }
            case Strategy::SmAware: {
                const long p_left = pool_remaining(OpKind::Prefill);
                const long d_left = pool_remaining(OpKind::Decode);
                if (p_left <= 0 && d_left <= 0) return false;
                // A full slot is claimed per ticket; virtual decode tasks fill
                // the slot's warps from consecutive CTA ids.
                if (free < warps_) {
                    if (d_left > 0 && virtual_decode_) {
                        std::vector<int> ids;
                        long claim = std::min<long>({(long)free, (long)warps_, d_left});
                        for (long i = 0; i < claim; ++i)
                            ids.push_back(sm_pool_[1][sched_.cta_assign[1]++]);
                        int q = 0;
                        for (int uid : ids) q += units_[uid].quanta;
                        place(sm, ids, q);
                        return true;
                    }
                    return false;
                }
                auto pick = sm_aware_assign(sm, sched_);
                if (!pick) return false;
                if (pick->op == OpKind::Decode && virtual_decode_) {
                    std::vector<int> ids{sm_pool_[1][pick->cta_id]};
                    int q = units_[ids[0]].quanta;
                    while (q < warps_ && sched_.cta_assign[1] < (long)sm_pool_[1].size()) {
                        int uid = sm_pool_[1][sched_.cta_assign[1]++];
                        ids.push_back(uid);
                        q += units_[uid].quanta;
                    }
                    place(sm, ids, q);
                } else {
                    const auto& pool = sm_pool_[pick->op == OpKind::Prefill ? 0 : 1];
                    const int uid = pool[pick->cta_id];
                    place(sm, {uid}, units_[uid].quanta);
                }
                return true;
            }
        }
        return false;
    }

    bool dispatch_fill() {
        bool any = false;
        while (true) {
            int best = -1;
            for (int s = 0; s < gpu_.num_sms; ++s)
                if (sm_free_[s] > 0 && (best < 0 || sm_free_[s] > sm_free_[best])) best = s;
            if (best < 0) break;
            if (!next_fill(best, sm_free_[best])) break;
            any = true;
            // Zero-work units complete immediately.
            drain_trivial();
        }
        return any;
    }

    void drain_trivial() {
        for (size_t i = 0; i < resident_.size();) {
            Unit& u = units_[resident_[i]];
            if (u.rem_c == 0 && u.rem_m == 0 && u.slice_c == 0 && u.slice_m == 0)
                complete_unit(resident_[i]);  // erases from resident_
            else
                ++i;
        }
    }

    // Compute: the SM's rate shared equally by its compute-remaining
    // residents. Memory: each SM delivers at most mem_bandwidth_per_sm,
    // degraded when multiple prefill CTAs crowd the SM; the global bus scales
    // everything down proportionally if SM demand exceeds it.
    void compute_rates() {
        for (int s : touched_sms_) {
            n_compute_[s] = 0;
            n_mem_[s] = 0;
            n_prefill_comp_[s] = 0;
        }
        touched_sms_.clear();
        for (int uid : resident_) {
            const Unit& u = units_[uid];
            if (n_compute_[u.sm] == 0 && n_mem_[u.sm] == 0) touched_sms_.push_back(u.sm);
            if (u.rem_c > 0) {
                n_compute_[u.sm]++;
                if (u.op == OpKind::Prefill) n_prefill_comp_[u.sm]++;
            }
            if (u.rem_m > 0) n_mem_[u.sm]++;
        }
        double demand = 0;
        for (int s : touched_sms_) {
            if (n_mem_[s] == 0) continue;
            const double crowd = 1.0 + gpu_.mem_interference *
                                           std::max(0, n_prefill_comp_[s] - 1);
            sm_mem_rate_[s] = gpu_.mem_bandwidth_per_sm / crowd;
            demand += sm_mem_rate_[s];
        }
        const double scale = demand > gpu_.mem_bandwidth_total
                                 ? gpu_.mem_bandwidth_total / demand
                                 : 1.0;
        for (int uid : resident_) {
            Unit& u = units_[uid];
            u.rate_c = u.rem_c > 0 ? gpu_.compute_rate_per_sm / n_compute_[u.sm] : 0;
            u.rate_m = u.rem_m > 0 ? sm_mem_rate_[u.sm] * scale / n_mem_[u.sm] : 0;
        }
    }

    void step() {
        compute_rates();
        double dt = std::numeric_limits<double>::infinity();
        for (int uid : resident_) {
            const Unit& u = units_[uid];
            if (u.rem_c > 0) dt = std::min(dt, u.rem_c / u.rate_c);
            if (u.rem_m > 0) dt = std::min(dt, u.rem_m / u.rate_m);
        }
        if (!std::isfinite(dt)) throw std::logic_error("simulate: no runnable work");
        now_ += dt;
        const double slack = dt * (1.0 + 1e-12);
        for (int uid : resident_) {
            Unit& u = units_[uid];
            if (u.rem_c > 0) {
                const double drain = std::min(u.rem_c, u.rate_c * dt);
                result_.compute_drained += drain;
                u.rem_c = (u.rem_c / u.rate_c <= slack) ? 0.0 : u.rem_c - u.rate_c * dt;
            }
            if (u.rem_m > 0) {
                const double drain = std::min(u.rem_m, u.rate_m * dt);
                result_.memory_drained += drain;
                u.rem_m = (u.rem_m / u.rate_m <= slack) ? 0.0 : u.rem_m - u.rate_m * dt;
            }
        }
        // Slice barriers and completions, in unit order for determinism.
        std::vector<int> done;
        for (int uid : resident_) {
            Unit& u = units_[uid];
            if (u.rem_c != 0 || u.rem_m != 0) continue;
            if (u.slices_done + 1 < u.slices_total) {
                u.slices_done++;
                u.rem_c = u.slice_c;
                u.rem_m = u.slice_m;
            } else {
                done.push_back(uid);
            }
        }
        std::sort(done.begin(), done.end());
        for (int uid : done) complete_unit(uid);
    }

    void complete_unit(int uid) {
        Unit& u = units_[uid];
        for (int tid : u.task_ids) {
            const OpKind op = tasks_[tid].task.op;
            result_.per_op_finish[static_cast<int>(op)] =
                std::max(result_.per_op_finish[static_cast<int>(op)], now_);
            if (op == OpKind::Prefill)
                sm_mix_[u.sm].first--;
            else
                sm_mix_[u.sm].second--;
            if (opt_.record_trace)
                result_.trace.push_back({now_, u.sm, 'C', tid, op});
        }
        if (opt_.record_trace)
            result_.per_sm_colocation_trace[u.sm].push_back(
                {now_, sm_mix_[u.sm].first, sm_mix_[u.sm].second});
        SlotGroup& g = groups_[u.group];
        if (--g.members_left == 0) sm_free_[g.sm] += g.quanta;
        if (strategy_.kind == Strategy::Serial) {
            const size_t launch = (size_t)tasks_[u.task_ids[0]].launch;
            if (--kernel_left_[launch] == 0 && active_kernel_ == launch) {
                active_kernel_++;
                while (active_kernel_ < kernel_units_.size() &&
                       kernel_units_[active_kernel_].empty())
                    active_kernel_++;
            }
        }
        resident_.erase(std::find(resident_.begin(), resident_.end(), uid));
        auto& sr = sm_resident_[u.sm];
        sr.erase(std::find(sr.begin(), sr.end(), uid));
        completed_++;
    }

    void finalize() {
        result_.makespan = now_;
        if (now_ > 0) {
            result_.compute_utilization =
                result_.total_compute_work / (now_ * gpu_.aggregate_compute_rate());
            result_.bandwidth_utilization =
                result_.total_memory_work / (now_ * gpu_.mem_bandwidth_total);
        }
    }

private:
    GpuSpec gpu_;
    ExecutionStrategy strategy_;
    SimOptions opt_;
    Rng rng_;
    int warps_ = 4;
    int slots_per_sm_ = 1;
    bool virtual_decode_ = false;

    std::vector<FlatTask> tasks_;
    std::vector<Unit> units_;
    std::vector<int> unit_of_task_;
    std::vector<char> dispatched_task_;

    // strategy queues
    std::vector<std::vector<int>> kernel_units_;
    std::vector<size_t> kernel_next_;
    std::vector<long> kernel_left_;
    size_t active_kernel_ = 0;
    size_t stream_rr_ = 0;
    std::vector<int> merged_;
    size_t merged_next_ = 0;
    std::vector<std::pair<int, int>> paired_;
    size_t pair_next_ = 0;
    std::vector<int> fused_queue_;
    size_t fused_next_ = 0;
    std::array<std::vector<int>, 2> sm_pool_;
    SchedulerState sched_;

    // runtime
    double now_ = 0;
    size_t completed_ = 0;
    std::vector<int> resident_;
    std::vector<std::vector<int>> sm_resident_;
    std::vector<int> sm_free_;
    std::vector<std::pair<int, int>> sm_mix_;
    std::vector<SlotGroup> groups_;
    std::vector<int> n_compute_;
    std::vector<int> n_mem_;
    std::vector<int> n_prefill_comp_;
    std::vector<double> sm_mem_rate_;
    std::vector<int> touched_sms_;
    SimResult result_;
};

}  // namespace detail

inline SimResult simulate(const GpuSpec& gpu, const std::vector<KernelLaunch>& launches,
                          const ExecutionStrategy& strategy, uint64_t seed = 0,
                          const SimOptions& opt = {}) {
    detail::SimEngine engine(gpu, launches, strategy, seed, opt);
    return engine.run();
}

// Builds the prefill/decode kernel launches for a decomposed hybrid batch.
inline std::vector<KernelLaunch> make_attention_launches(const WorkDecomposition& wd) {
    std::vector<KernelLaunch> launches;
    if (!wd.prefill_tasks.empty())
        launches.push_back({wd.prefill_tasks, wd.config.shared_mem_per_cta, 0,
                            wd.config.warps_per_cta, wd.config.ctas_per_sm});
    if (!wd.decode_tasks.empty())
        launches.push_back({wd.decode_tasks, wd.config.shared_mem_per_cta, 1,
                            wd.config.warps_per_cta, wd.config.ctas_per_sm});
    return launches;
}

// Best fused makespan over the runtime-selectable configurations: both
// scheduling policies at both occupancy settings.
inline double best_fused_makespan(const GpuSpec& gpu, const HybridBatchSpec& batch,
                                  uint64_t seed = 0) {
    SimOptions opt;
    opt.record_trace = false;
    double best = std::numeric_limits<double>::infinity();
    for (int ctas : {2, 4}) {
        auto launches = make_attention_launches(
            decompose_hybrid(batch, gpu, make_tile_config(ctas)));
        for (auto policy : {SmPolicy::FiftyFifty, SmPolicy::Proportional}) {
            auto r = simulate(gpu, launches, ExecutionStrategy::sm_aware(policy), seed, opt);
            best = std::min(best, r.makespan);
        }
    }
    return best;
}

// Micro-benchmark pair: a compute-bound kernel that iterates a scalar-multiply
// and a memory-bound kernel that adds three arrays. Calibrated so both serial
// runtimes are equal at compute_iters = 100 on the given machine.
inline std::pair<KernelLaunch, KernelLaunch> make_microbench(long compute_iters, long array_len,
                                                             const GpuSpec& gpu) {
    if (compute_iters < 1) throw std::invalid_argument("make_microbench: compute_iters < 1");
    const long n_tasks = 2L * gpu.num_sms;
    const double mem_per_task = 3.0 * array_len;
    const double compute_unit =
        mem_per_task * gpu.compute_rate_per_sm * gpu.num_sms / (gpu.mem_bandwidth_total * 100.0);

    KernelLaunch compute_kernel;
    compute_kernel.stream_id = 0;
    compute_kernel.shared_mem_per_cta = 1024;
    for (long i = 0; i < n_tasks; ++i) {
        CtaTask t;
        t.op = OpKind::Prefill;
        t.request_id = (int)i;
        t.compute_work = compute_unit * compute_iters;
        t.memory_work = 0;
        t.barrier_segments = compute_iters;
        t.slot_quanta = 4;
        compute_kernel.tasks.push_back(t);
    }
    KernelLaunch memory_kernel;
    memory_kernel.stream_id = 1;
    memory_kernel.shared_mem_per_cta = 1024;
    for (long i = 0; i < n_tasks; ++i) {
        CtaTask t;
        t.op = OpKind::Decode;
        t.request_id = (int)i;
        t.compute_work = 0;
        t.memory_work = mem_per_task;
        t.barrier_segments = 100;
        t.slot_quanta = 4;
        memory_kernel.tasks.push_back(t);
    }
    return {compute_kernel, memory_kernel};
}

}  // namespace attnsim
