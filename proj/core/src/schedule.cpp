#include "gnlab/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "gnlab/errors.hpp"

namespace gnlab {

namespace {

// Linear ramp over [0, warmup), then a half cosine from 1 to 0 over the rest.
double warm_cosine(double pos, double warmup, bool decay) {
    if (pos < warmup) {
        return pos / warmup;
    }
    if (!decay) {
        return 1.0;
    }
    const double x = (pos - warmup) / (1.0 - warmup);
    return 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(x, 1.0)));
}

}  // namespace

const char* schedule_name(ScheduleKind kind) {
    switch (kind) {
        case ScheduleKind::constant: return "constant";
        case ScheduleKind::global_cosine: return "global_cosine";
        case ScheduleKind::global_plus_inner_cosine: return "global_plus_inner_cosine";
        case ScheduleKind::constant_plus_inner_cosine: return "constant_plus_inner_cosine";
    }
    return "unknown";
}

ScheduleKind parse_schedule(std::string_view name) {
    if (name == "cosine") {
        return ScheduleKind::global_cosine;
    }
    for (auto k : {ScheduleKind::constant, ScheduleKind::global_cosine, ScheduleKind::global_plus_inner_cosine,
                   ScheduleKind::constant_plus_inner_cosine}) {
        if (name == schedule_name(k)) {
            return k;
        }
    }
    throw ConfigError("unknown schedule '" + std::string(name) + "'");
}

void ScheduleSpec::validate() const {
    if (!(global_warmup_fraction >= 0.0 && global_warmup_fraction < 1.0)) {
        throw ConfigError("global_warmup_fraction must be in [0, 1)");
    }
    if (!(inner_warmup_fraction >= 0.0 && inner_warmup_fraction < 1.0)) {
        throw ConfigError("inner_warmup_fraction must be in [0, 1)");
    }
    if (total_outer_steps == 0) {
        throw ConfigError("schedule needs at least one outer step");
    }
}

double lr_multiplier(const ScheduleSpec& spec, std::size_t outer, std::size_t inner, std::size_t n_inner) {
    spec.validate();
    if (n_inner == 0 || inner >= n_inner) {
        throw ConfigError("inner step " + std::to_string(inner) + " outside [0, " + std::to_string(n_inner) + ")");
    }
    // Runs may go past the planned horizon (target-loss stopping); the
    // envelope then stays at its end value.
    const double global_pos = std::min(
        1.0, (static_cast<double>(outer) * static_cast<double>(n_inner) + static_cast<double>(inner)) /
                 (static_cast<double>(spec.total_outer_steps) * static_cast<double>(n_inner)));
    const double inner_pos = static_cast<double>(inner) / static_cast<double>(n_inner);
    const bool inner_ramp = spec.kind == ScheduleKind::constant_plus_inner_cosine ||
                            (spec.inner_warmup_all_inner_kinds && spec.kind == ScheduleKind::global_plus_inner_cosine);
    const double inner_warm = inner_ramp ? spec.inner_warmup_fraction : 0.0;

    double m = 1.0;
    switch (spec.kind) {
        case ScheduleKind::constant:
            m = warm_cosine(global_pos, spec.global_warmup_fraction, false);
            break;
        case ScheduleKind::global_cosine:
            m = warm_cosine(global_pos, spec.global_warmup_fraction, true);
            break;
        case ScheduleKind::global_plus_inner_cosine:
            m = warm_cosine(global_pos, spec.global_warmup_fraction, true) * warm_cosine(inner_pos, inner_warm, true);
            break;
        case ScheduleKind::constant_plus_inner_cosine:
            m = warm_cosine(global_pos, spec.global_warmup_fraction, false) * warm_cosine(inner_pos, inner_warm, true);
            break;
    }
    return std::clamp(m, 0.0, 1.0);
}

}  // namespace gnlab
