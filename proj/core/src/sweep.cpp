#include <algorithm>
#include <cmath>
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

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path + "'");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::ofstream open_csv(const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot write '" + path + "'");
    }
    out.precision(17);
    return out;
}

template <typename T>
std::string cell(const std::optional<T>& v) {
    if (!v) {
        return "";
    }
    std::ostringstream os;
    os.precision(17);
    os << *v;
    return os.str();
}

std::string quoted(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char ch : s) {
        if (ch == '"') {
            out += '"';
        }
        out += ch;
    }
    return out + "\"";
}

}  // namespace

// ---- grid -----------------------------------------------------------------------

SweepGrid parse_grid(std::string_view json_text) {
    Json j;
    try {
        j = Json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("grid: invalid JSON: ") + e.what());
    }
    if (!j.is_object()) {
        throw ConfigError("grid: expected an object");
    }
    static const std::set<std::string> known{"batch_seqs", "tokens", "target_loss", "max_steps"};
    for (const auto& [k, v] : j.items()) {
        if (!known.count(k)) {
            throw ConfigError("grid: unknown key '" + k + "'");
        }
    }
    SweepGrid g;
    try {
        g.batch_seqs = j.at("batch_seqs").get<std::vector<std::size_t>>();
        if (j.contains("tokens") && !j["tokens"].is_null()) {
            g.tokens = j["tokens"].get<std::uint64_t>();
        }
        if (j.contains("target_loss") && !j["target_loss"].is_null()) {
            g.target_loss = j["target_loss"].get<double>();
        }
        if (j.contains("max_steps")) {
            g.max_steps = j["max_steps"].get<std::size_t>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("grid: ") + e.what());
    }
    if (g.batch_seqs.empty()) {
        throw ConfigError("grid: batch_seqs must not be empty");
    }
    for (std::size_t b : g.batch_seqs) {
        if (b == 0) {
            throw ConfigError("grid: batch sizes must be positive");
        }
    }
    return g;
}

SweepGrid load_grid(const std::string& path) { return parse_grid(read_text(path)); }

ExperimentConfig sweep_point_config(const ExperimentConfig& base, const SweepGrid& grid, std::size_t batch_seqs) {
    ExperimentConfig c = base;
    c.out = (fs::path(base.out) / ("b" + std::to_string(batch_seqs))).string();
    c.name = base.name + "-b" + std::to_string(batch_seqs);
    if (c.warmup.cache_dir.empty()) {
        c.warmup.cache_dir = (fs::path(base.out) / "warmup").string();
    }
    if (is_gn_family(c.method)) {
        const std::size_t b_inner = c.gn.inner.b_inner;
        if (b_inner == 0 || batch_seqs % b_inner != 0) {
            throw ConfigError("batch " + std::to_string(batch_seqs) + " is not a multiple of b_inner " +
                              std::to_string(b_inner));
        }
        c.gn.inner.n_steps = batch_seqs / b_inner;
    } else {
        c.batch_seqs = batch_seqs;
    }
    if (grid.tokens || grid.target_loss) {
        const std::size_t max_steps = c.stop.max_steps;
        c.stop = StopConfig{};
        c.stop.max_steps = max_steps;
        if (grid.tokens) {
            c.stop.tokens = grid.tokens;
        } else {
            c.stop.target_loss = grid.target_loss;
        }
    }
    if (grid.max_steps) {
        c.stop.max_steps = grid.max_steps;
    }
    c.validate();
    return c;
}

// ---- sweep ------------------------------------------------------------------------

std::string sweep_to_json(const SweepResult& result) {
    Json points = Json::array();
    for (const auto& p : result.points) {
        Json j;
        j["batch_seqs"] = p.batch_seqs;
        j["n_inner"] = p.n_inner;
        j["steps_to_target"] = p.steps_to_target ? Json(*p.steps_to_target) : Json(nullptr);
        j["final_loss"] = p.final_loss ? Json(*p.final_loss) : Json(nullptr);
        j["steps"] = p.steps;
        j["tokens_seen"] = p.tokens_seen;
        j["record_path"] = p.record_path;
        j["failed"] = p.failed;
        j["reason"] = p.reason;
        points.push_back(j);
    }
    return Json{{"points", points}}.dump(2);
}

SweepResult sweep_from_json(std::string_view text) {
    try {
        const Json j = Json::parse(text);
        SweepResult r;
        for (const auto& pj : j.at("points")) {
            SweepPoint p;
            p.batch_seqs = pj.at("batch_seqs").get<std::size_t>();
            p.n_inner = pj.at("n_inner").get<std::size_t>();
            if (!pj.at("steps_to_target").is_null()) {
                p.steps_to_target = pj.at("steps_to_target").get<std::size_t>();
            }
            if (!pj.at("final_loss").is_null()) {
                p.final_loss = pj.at("final_loss").get<double>();
            }
            p.steps = pj.at("steps").get<std::size_t>();
            p.tokens_seen = pj.at("tokens_seen").get<std::uint64_t>();
            p.record_path = pj.at("record_path").get<std::string>();
            p.failed = pj.at("failed").get<bool>();
            p.reason = pj.at("reason").get<std::string>();
            r.points.push_back(std::move(p));
        }
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("bad sweep file: ") + e.what());
    }
}

SweepResult batch_size_sweep(const ExperimentConfig& base, const SweepGrid& grid) {
    fs::create_directories(base.out);
    const std::string sweep_path = (fs::path(base.out) / "sweep.json").string();
    SweepResult result;
    for (std::size_t b : grid.batch_seqs) {
        SweepPoint p;
        p.batch_seqs = b;
        try {
            const ExperimentConfig pc = sweep_point_config(base, grid, b);
            p.record_path = pc.out;
            p.n_inner = is_gn_family(pc.method) ? pc.gn.inner.n_steps : 0;
            const fs::path summary_file = fs::path(pc.out) / "summary.json";
            std::optional<RunSummary> done;
            if (fs::exists(summary_file)) {
                RunSummary prev = summary_from_json(read_text(summary_file.string()));
                if (prev.completed) {
                    done = std::move(prev);
                }
            }
            RunOptions opts;
            opts.report_target = grid.target_loss;
            const RunSummary m = done ? *done : warmup_then_train(pc, opts);
            p.steps_to_target = m.steps_to_target;
            p.final_loss = m.final_eval_loss;
            p.steps = m.steps;
            p.tokens_seen = m.tokens_seen;
            if (!m.failure.empty()) {
                p.failed = true;
                p.reason = m.failure;
            }
        } catch (const Error& e) {
            p.failed = true;
            p.reason = e.what();
        }
        result.points.push_back(std::move(p));
        std::ofstream(sweep_path, std::ios::trunc) << sweep_to_json(result) << '\n';
    }
    return result;
}

// ---- critical batch size ------------------------------------------------------------

CbsEstimate critical_batch_size(std::span<const CbsSample> samples, double rho) {
    if (!(rho > 0.0 && rho < 1.0)) {
        throw ConfigError("critical_batch_size: rho must be in (0, 1)");
    }
    CbsEstimate est;
    est.curve.assign(samples.begin(), samples.end());
    std::sort(est.curve.begin(), est.curve.end(), [](const CbsSample& a, const CbsSample& b) { return a.batch < b.batch; });
    std::vector<CbsSample> resolved;
    for (const auto& s : est.curve) {
        if (!(s.batch > 0.0)) {
            throw ConfigError("critical_batch_size: batch sizes must be positive");
        }
        if (s.steps) {
            resolved.push_back(s);
        }
    }
    if (resolved.size() < 2) {
        throw ConfigError("critical_batch_size: need at least two grid points that reached the target");
    }
    est.partial = resolved.size() != est.curve.size() || resolved.size() < 3;
    for (std::size_t i = 0; i + 1 < resolved.size(); ++i) {
        const double ratio = resolved[i + 1].batch / resolved[i].batch;
        const double allowed = std::pow(1.0 - rho, std::log2(ratio)) * *resolved[i].steps;
        if (*resolved[i + 1].steps > allowed) {
            est.batch = resolved[i].batch;
            est.plateau_found = true;
            return est;
        }
    }
    est.batch = resolved.back().batch;
    return est;
}

// ---- CSV ----------------------------------------------------------------------

void write_log_csv(std::span<const RunRecord> log, const std::string& path) {
    auto out = open_csv(path);
    out << "step,tokens_seen,train_loss,eval_loss,lr,alpha_star,wall_ms\n";
    for (const auto& r : log) {
        out << r.step << ',' << r.tokens_seen << ',' << r.train_loss << ',' << cell(r.eval_loss) << ',' << r.lr << ','
            << cell(r.alpha_star) << ',' << r.wall_ms << '\n';
    }
}

void write_schedule_csv(const ExperimentConfig& c, const std::string& path) {
    ScheduleSpec s = c.schedule;
    s.total_outer_steps = std::max<std::size_t>(1, c.schedule_steps ? c.schedule_steps : planned_steps(c));
    const std::size_t n = is_gn_family(c.method) ? c.gn.inner.n_steps : 1;
    auto out = open_csv(path);
    out << "outer,inner,position,lr_multiplier\n";
    const double denom = static_cast<double>(s.total_outer_steps * n);
    for (std::size_t o = 0; o < s.total_outer_steps; ++o) {
        for (std::size_t k = 0; k < n; ++k) {
            out << o << ',' << k << ',' << static_cast<double>(o * n + k) / denom << ',' << lr_multiplier(s, o, k, n)
                << '\n';
        }
    }
}

void write_sweep_csv(const SweepResult& result, const std::string& path) {
    auto out = open_csv(path);
    out << "batch_seqs,n_inner,tokens_seen,steps,steps_to_target,final_loss,failed,reason,record_path\n";
    for (const auto& p : result.points) {
        out << p.batch_seqs << ',' << p.n_inner << ',' << p.tokens_seen << ',' << p.steps << ','
            << cell(p.steps_to_target) << ',' << cell(p.final_loss) << ',' << (p.failed ? 1 : 0) << ','
            << quoted(p.reason) << ',' << quoted(p.record_path) << '\n';
    }
}

void write_cbs_csv(const CbsEstimate& est, const std::string& path) {
    auto out = open_csv(path);
    out << "batch_seqs,steps_to_target,estimate,plateau_found,partial\n";
    for (const auto& s : est.curve) {
        out << s.batch << ',' << cell(s.steps) << ',' << (s.batch == est.batch ? 1 : 0) << ','
            << (est.plateau_found ? 1 : 0) << ',' << (est.partial ? 1 : 0) << '\n';
    }
}

std::vector<std::string> export_csv(const std::string& dir, double rho) {
    if (!fs::is_directory(dir)) {
        throw IoError("'" + dir + "' is not a directory");
    }
    std::vector<std::string> written;
    const fs::path d(dir);
    if (fs::exists(d / "log.jsonl")) {
        const auto log = read_log((d / "log.jsonl").string());
        write_log_csv(log, (d / "log.csv").string());
        written.push_back((d / "log.csv").string());
    }
    if (fs::exists(d / "config.json")) {
        write_schedule_csv(load_config((d / "config.json").string()), (d / "schedule.csv").string());
        written.push_back((d / "schedule.csv").string());
    }
    if (fs::exists(d / "sweep.json")) {
        const SweepResult r = sweep_from_json(read_text((d / "sweep.json").string()));
        write_sweep_csv(r, (d / "sweep.csv").string());
        written.push_back((d / "sweep.csv").string());
        std::vector<CbsSample> samples;
        for (const auto& p : r.points) {
            samples.push_back({static_cast<double>(p.batch_seqs),
                               p.steps_to_target ? std::optional<double>(static_cast<double>(*p.steps_to_target))
                                                 : std::nullopt});
        }
        try {
            write_cbs_csv(critical_batch_size(samples, rho), (d / "cbs.csv").string());
            written.push_back((d / "cbs.csv").string());
        } catch (const ConfigError&) {
            // too few resolved points for an estimate
        }
    }
    if (written.empty()) {
        throw IoError("'" + dir + "' holds neither a run log nor a sweep");
    }
    return written;
}

}  // namespace gnlab
