#pragma once

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <utility>

#include "comemo/decay.hpp"
#include "comemo/tasks.hpp"

namespace comemo {

inline constexpr const char* kVersionString = "comemo-v0.1.0-desk";

// Shortest decimal form that still round-trips; keeps artifact bytes
// reproducible without printing 17 digits everywhere.
inline std::string fmt_double(double x) {
    char buf[40];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, x);
        if (std::strtod(buf, nullptr) == x) break;
    }
    std::string g = buf;
    // %g reaches for scientific notation on round numbers (1e+02); prefer the
    // plain spelling when it round-trips and is no longer
    if (g.find('e') != std::string::npos) {
        std::snprintf(buf, sizeof buf, "%.0f", x);
        std::string plain = buf;
        if (plain.size() <= g.size() && std::strtod(plain.c_str(), nullptr) == x) return plain;
    }
    return g;
}

// Artifacts are buffered fully, then written through a temp file + rename so
// readers never observe partial output.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open for writing: " + tmp.string());
        f.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!f) throw std::runtime_error("short write: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// CSV emitters (column layouts are part of the tool contract)

inline std::string decay_csv(const std::vector<DecayCurve>& curves) {
    std::string out = "distance,value,kind\n";
    for (const DecayCurve& c : curves) {
        require_arg(c.distances.size() == c.values.size(), "decay_csv: ragged curve");
        for (size_t i = 0; i < c.distances.size(); ++i)  // distances are integral by construction
            out += std::to_string(std::llround(c.distances[i])) + "," + fmt_double(c.values[i]) + "," +
                   to_string(c.kind) + "\n";
    }
    return out;
}

inline std::string bins_csv(const std::vector<BinProfile>& profiles) {
    std::string out = "bin,quantity,value\n";
    for (const BinProfile& p : profiles)
        for (int b = 0; b < kProfileBins; ++b)
            out += std::to_string(b) + "," + std::string(to_string(p.quantity)) + "," +
                   fmt_double(p.value[static_cast<size_t>(b)]) + "\n";
    return out;
}

inline std::string niah_csv(const NiahResult& r) {
    std::string out = "length,depth,accuracy\n";
    for (size_t i = 0; i < r.lengths.size(); ++i)
        for (size_t j = 0; j < r.depths.size(); ++j)
            out += std::to_string(r.lengths[i]) + "," + fmt_double(r.depths[j]) + "," +
                   fmt_double(r.accuracy.at(static_cast<int64_t>(i), static_cast<int64_t>(j))) + "\n";
    return out;
}

inline std::string metrics_csv(const std::vector<TrainMetricsRow>& rows) {
    require_arg(!rows.empty(), "metrics_csv: no rows");
    size_t n_gates = rows.front().gates.size();
    std::string out = "step,loss,lr";
    for (size_t g = 0; g < n_gates; ++g) out += ",gate_" + std::to_string(g);
    out += "\n";
    for (const TrainMetricsRow& r : rows) {
        require_arg(r.gates.size() == n_gates, "metrics_csv: inconsistent gate count");
        out += std::to_string(r.step) + "," + fmt_double(r.loss) + "," + fmt_double(r.lr);
        for (double g : r.gates) out += "," + fmt_double(g);
        out += "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// portable graymap heatmap (rows = lengths, cols = depths, accuracy 0..1)

inline std::string niah_pgm(const NiahResult& r) {
    int rows = static_cast<int>(r.lengths.size());
    int cols = static_cast<int>(r.depths.size());
    std::string out = "P2\n# retrieval accuracy heatmap; rows=context length, cols=needle depth\n";
    out += std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
            double a = r.accuracy.at(i, j);
            int gray = static_cast<int>(std::llround(std::clamp(a, 0.0, 1.0) * 255.0));
            out += std::to_string(gray);
            out += (j + 1 == cols) ? '\n' : ' ';
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// run records and config files (key=value lines, '#' comments)

inline std::string run_record(const std::vector<std::pair<std::string, std::string>>& kv) {
    std::string out;
    out += "version=" + std::string(kVersionString) + "\n";
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
}

inline std::map<std::string, std::string> parse_config_text(const std::string& text) {
    std::map<std::string, std::string> out;
    size_t line_no = 0, pos = 0;
    while (pos <= text.size()) {
        size_t nl = text.find('\n', pos);
        std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
        pos = (nl == std::string::npos) ? text.size() + 1 : nl + 1;
        ++line_no;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        auto strip = [](std::string s) {
            size_t a = s.find_first_not_of(" \t\r");
            if (a == std::string::npos) return std::string();
            size_t b = s.find_last_not_of(" \t\r");
            return s.substr(a, b - a + 1);
        };
        line = strip(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key=value");
        std::string key = strip(line.substr(0, eq));
        std::string val = strip(line.substr(eq + 1));
        if (key.empty()) throw std::invalid_argument("config line " + std::to_string(line_no) + ": empty key");
        out[key] = val;
    }
    return out;
}

inline std::map<std::string, std::string> parse_config_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::invalid_argument("cannot open config file: " + path.string());
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_config_text(text);
}

}  // namespace comemo
