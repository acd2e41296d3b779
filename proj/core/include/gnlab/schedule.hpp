#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace gnlab {

enum class ScheduleKind : std::uint8_t {
    constant,
    global_cosine,
    global_plus_inner_cosine,
    constant_plus_inner_cosine,
};

const char* schedule_name(ScheduleKind kind);
/// Accepts the names above plus "cosine" as an alias of global_cosine.
ScheduleKind parse_schedule(std::string_view name);

struct ScheduleSpec {
    ScheduleKind kind = ScheduleKind::constant;
    double global_warmup_fraction = 0.0;
    double inner_warmup_fraction = 0.0;
    std::size_t total_outer_steps = 1;
    // By default the inner ramp only applies to constant_plus_inner_cosine.
    bool inner_warmup_all_inner_kinds = false;

    void validate() const;
};

/// Learning-rate multiplier in [0, 1] for inner step `inner` of outer step
/// `outer`, with N inner steps per outer step. Baseline optimizers use
/// inner = 0, N = 1.
double lr_multiplier(const ScheduleSpec& spec, std::size_t outer, std::size_t inner, std::size_t n_inner);

}  // namespace gnlab
