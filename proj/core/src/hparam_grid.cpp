#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "gnlab/harness.hpp"

namespace gnlab {

namespace fs = std::filesystem;

namespace {

using Json = nlohmann::ordered_json;

void require_keys(const Json& j, const std::set<std::string>& known, const std::string& where) {
    if (!j.is_object()) {
        throw ConfigError(where + ": expected an object");
    }
    for (const auto& [k, v] : j.items()) {
        if (!known.count(k)) {
            throw ConfigError(where + ": unknown key '" + k + "'");
        }
    }
}

// "a.b.c", v -> {"a": {"b": {"c": v}}}
Json nest(const std::string& path, const Json& value) {
    Json out = value;
    std::size_t end = path.size();
    while (true) {
        const std::size_t dot = path.rfind('.', end - 1);
        const std::size_t start = dot == std::string::npos ? 0 : dot + 1;
        const std::string key = path.substr(start, end - start);
        if (key.empty()) {
            throw ConfigError("grid: bad path '" + path + "'");
        }
        Json wrap = Json::object();
        wrap[key] = std::move(out);
        out = std::move(wrap);
        if (dot == std::string::npos) {
            return out;
        }
        end = dot;
    }
}

std::string value_label(const Json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

GridAxis read_axis(const Json& a, std::size_t pos) {
    const std::string where = "grid: axes[" + std::to_string(pos) + "]";
    require_keys(a, {"name", "path", "values", "patches"}, where);
    GridAxis axis;
    axis.name = a.value("name", "axis" + std::to_string(pos));
    if (a.contains("values") == a.contains("patches")) {
        throw ConfigError(where + ": give either path+values or patches");
    }
    if (a.contains("values")) {
        if (!a.contains("path") || !a["values"].is_array()) {
            throw ConfigError(where + ": values need a path and an array");
        }
        const std::string path = a["path"].get<std::string>();
        for (const auto& v : a["values"]) {
            axis.labels.push_back(value_label(v));
            axis.patches.push_back(nest(path, v).dump());
        }
    } else {
        if (!a["patches"].is_array()) {
            throw ConfigError(where + ": patches must be an array");
        }
        for (const auto& p : a["patches"]) {
            require_keys(p, {"label", "set"}, where + ".patches");
            axis.labels.push_back(p.at("label").get<std::string>());
            axis.patches.push_back(p.at("set").dump());
        }
    }
    if (axis.patches.empty()) {
        throw ConfigError(where + ": no values");
    }
    return axis;
}

}  // namespace

HparamGrid parse_hparam_grid(std::string_view json_text) {
    Json j;
    try {
        j = Json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("grid: invalid JSON: ") + e.what());
    }
    require_keys(j, {"name", "base", "axes", "sweep"}, "grid");
    HparamGrid g;
    try {
        g.name = j.value("name", "");
        g.base_json = j.at("base").dump();
        if (j.contains("axes")) {
            std::size_t pos = 0;
            for (const auto& a : j["axes"]) {
                g.axes.push_back(read_axis(a, pos++));
            }
        }
        if (j.contains("sweep")) {
            g.sweep = parse_grid(j["sweep"].dump());
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("grid: ") + e.what());
    }
    parse_config(g.base_json);
    return g;
}

HparamGrid load_hparam_grid(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path + "'");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_hparam_grid(ss.str());
}

std::size_t grid_size(const HparamGrid& grid) {
    std::size_t n = 1;
    for (const auto& a : grid.axes) {
        n *= a.patches.size();
    }
    return n;
}

GridPoint grid_point(const HparamGrid& grid, std::size_t index) {
    const std::size_t total = grid_size(grid);
    if (index >= total) {
        throw ConfigError("grid: point " + std::to_string(index) + " out of range (" + std::to_string(total) +
                          " points)");
    }
    std::vector<std::size_t> digit(grid.axes.size());
    std::size_t rest = index;
    for (std::size_t k = grid.axes.size(); k-- > 0;) {
        digit[k] = rest % grid.axes[k].patches.size();
        rest /= grid.axes[k].patches.size();
    }
    Json patch = Json::object();
    std::string label;
    for (std::size_t k = 0; k < grid.axes.size(); ++k) {
        patch.merge_patch(Json::parse(grid.axes[k].patches[digit[k]]));
        label += (label.empty() ? "" : "_") + grid.axes[k].name + "-" + grid.axes[k].labels[digit[k]];
    }
    if (label.empty()) {
        label = "base";
    }
    const ExperimentConfig base = parse_config(grid.base_json);
    GridPoint p;
    p.index = index;
    p.label = label;
    p.config = apply_overrides(base, patch.dump());
    p.config.out = (fs::path(base.out) / label).string();
    p.config.name = (base.name.empty() ? grid.name : base.name) + "-" + std::to_string(index);
    return p;
}

}  // namespace gnlab
