#pragma once

// Run configuration: INI-style sections of `key = value` lines. Complex
// values are written `re,im`. Unknown sections and keys are rejected.

#include "cellopt/cost.hpp"
#include "cellopt/errors.hpp"
#include "cellopt/kinematics.hpp"
#include "cellopt/optimizer.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace cellopt {

struct GeometryConfig {
    double radius = 0.3;
    int refinements = 4;
    std::string mesh; // optional mesh file, overrides generation
};

struct OutputConfig {
    std::string directory = "out";
    int vtk_every = 25;
    std::string log_format = "csv";
};

struct GradientCheckConfig {
    int directions = 10;
    double amplitude = 0.02;
    unsigned seed = 1;
};

struct RunConfig {
    GeometryConfig geometry;
    MaterialParameters material;
    CostConfig cost;
    StageSchedule schedule = StageSchedule::single(0.1);
    bool has_schedule = false; // false: single stage at cost.beta
    OptimizerOptions optimizer;
    OutputConfig output;
    std::string deformation; // optional initial deformation file
    GradientCheckConfig gradient_check;

    RunConfig() {
        cost.target << Complex(0.5, 0.01), 0.05, 0.05, Complex(0.5, 0.01);
    }

    StageSchedule stages() const { return has_schedule ? schedule : StageSchedule::single(cost.beta); }

    void validate() const {
        if (!(geometry.radius > 0.0 && geometry.radius < 0.5)) throw ConfigError("geometry.radius must lie in (0, 0.5)");
        if (geometry.refinements < 0 || geometry.refinements > 12)
            throw ConfigError("geometry.refinements must lie in [0, 12]");
        material.validate();
        cost.validate();
        stages().validate();
        optimizer.validate();
        if (output.directory.empty()) throw ConfigError("output.directory is empty");
        if (output.vtk_every < 0) throw ConfigError("output.vtk_every must be non-negative");
        if (output.log_format != "csv") throw ConfigError("output.log_format must be 'csv'");
        if (gradient_check.directions <= 0) throw ConfigError("gradient_check.directions must be positive");
        if (!(gradient_check.amplitude > 0.0)) throw ConfigError("gradient_check.amplitude must be positive");
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string format_complex(Complex z) { return format_double(z.real()) + "," + format_double(z.imag()); }

inline double parse_double(const std::string& s, const std::string& key, int line) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw ParseError("'" + key + "': expected a number, got '" + s + "'", line);
    }
    if (trim(s.substr(pos)).size()) throw ParseError("'" + key + "': trailing characters in '" + s + "'", line);
    return v;
}

inline long long parse_int(const std::string& s, const std::string& key, int line) {
    std::size_t pos = 0;
    long long v = 0;
    try {
        v = std::stoll(s, &pos);
    } catch (const std::exception&) {
        throw ParseError("'" + key + "': expected an integer, got '" + s + "'", line);
    }
    if (trim(s.substr(pos)).size()) throw ParseError("'" + key + "': expected an integer, got '" + s + "'", line);
    return v;
}

inline Complex parse_complex(const std::string& s, const std::string& key, int line) {
    const auto comma = s.find(',');
    if (comma == std::string::npos) return {parse_double(trim(s), key, line), 0.0};
    return {parse_double(trim(s.substr(0, comma)), key, line), parse_double(trim(s.substr(comma + 1)), key, line)};
}

} // namespace detail

/// "100:0.8, rest:0.1" -> two stages.
inline StageSchedule parse_schedule(const std::string& text, int line = 0) {
    StageSchedule s;
    s.stages.clear();
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = detail::trim(item);
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw ParseError("schedule entry '" + item + "' is not 'steps:beta'", line);
        const std::string n = detail::trim(item.substr(0, colon));
        Stage st;
        if (n != "rest") st.steps = static_cast<int>(detail::parse_int(n, "schedule", line));
        st.beta = detail::parse_double(detail::trim(item.substr(colon + 1)), "schedule", line);
        s.stages.push_back(st);
    }
    if (s.stages.empty()) throw ParseError("empty schedule", line);
    return s;
}

inline std::string format_schedule(const StageSchedule& s) {
    std::string out;
    for (std::size_t i = 0; i < s.stages.size(); ++i) {
        if (i) out += ", ";
        out += (s.stages[i].steps ? std::to_string(*s.stages[i].steps) : std::string("rest")) + ":" +
               detail::format_double(s.stages[i].beta);
    }
    return out;
}

/// Parses and validates a configuration. Keys missing from the text keep
/// their defaults.
inline RunConfig parse_config(std::istream& is) {
    RunConfig c;
    std::string section, raw;
    int line = 0;
    std::map<std::string, int> seen;
    const char* entries[] = {"xx", "xy", "yx", "yy"};

    while (std::getline(is, raw)) {
        ++line;
        if (auto p = raw.find_first_of("#;"); p != std::string::npos) raw.erase(p);
        const std::string t = detail::trim(raw);
        if (t.empty()) continue;
        if (t.front() == '[') {
            if (t.back() != ']') throw ParseError("malformed section header '" + t + "'", line);
            section = detail::trim(t.substr(1, t.size() - 2));
            static const char* known[] = {"geometry", "material", "cost", "optimizer", "output", "input", "gradient_check"};
            if (std::find(std::begin(known), std::end(known), section) == std::end(known))
                throw ConfigError("line " + std::to_string(line) + ": unknown section [" + section + "]");
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw ParseError("expected 'key = value'", line);
        const std::string key = detail::trim(t.substr(0, eq)), val = detail::trim(t.substr(eq + 1));
        if (section.empty()) throw ParseError("key '" + key + "' outside of a section", line);
        const std::string full = section + "." + key;
        if (seen.count(full)) throw ParseError("duplicate key '" + full + "'", line);
        seen[full] = line;

        auto num = [&] { return detail::parse_double(val, full, line); };
        auto integer = [&] { return detail::parse_int(val, full, line); };
        auto cplx = [&] { return detail::parse_complex(val, full, line); };
        auto entry = [&](const std::string& prefix) -> int {
            for (int i = 0; i < 4; ++i)
                if (key == prefix + entries[i]) return i;
            return -1;
        };

        bool ok = true;
        if (section == "geometry") {
            if (key == "radius") c.geometry.radius = num();
            else if (key == "refinements") c.geometry.refinements = static_cast<int>(integer());
            else if (key == "mesh") c.geometry.mesh = val;
            else ok = false;
        } else if (section == "material") {
            if (key == "omega") c.material.omega = num();
            else if (key == "omega_p") c.material.omega_p = num();
            else if (key == "tau") c.material.tau = num();
            else if (int i = entry("eps_"); i >= 0) c.material.eps(i / 2, i % 2) = cplx();
            else ok = false;
        } else if (section == "cost") {
            if (key == "alpha") c.cost.alpha = num();
            else if (key == "alpha_sigma") c.cost.alpha_sigma = num();
            else if (key == "beta") c.cost.beta = num();
            else if (key == "schedule") {
                c.schedule = parse_schedule(val, line);
                c.has_schedule = true;
            } else if (int i = entry("target_"); i >= 0) c.cost.target(i / 2, i % 2) = cplx();
            else ok = false;
        } else if (section == "optimizer") {
            if (key == "max_steps") c.optimizer.max_steps = static_cast<int>(integer());
            else if (key == "tolerance") c.optimizer.tolerance = num();
            else if (key == "armijo_shrink") c.optimizer.armijo.shrink = num();
            else if (key == "armijo_gamma") c.optimizer.armijo.sufficient = num();
            else if (key == "history_cap") {
                const long long n = integer();
                if (n < 0) throw ConfigError("optimizer.history_cap must be non-negative");
                c.optimizer.history_cap = n ? std::optional<std::size_t>(n) : std::nullopt;
            } else ok = false;
        } else if (section == "output") {
            if (key == "directory") c.output.directory = val;
            else if (key == "vtk_every") c.output.vtk_every = static_cast<int>(integer());
            else if (key == "log_format") c.output.log_format = val;
            else ok = false;
        } else if (section == "input") {
            if (key == "deformation") c.deformation = val;
            else ok = false;
        } else if (section == "gradient_check") {
            if (key == "directions") c.gradient_check.directions = static_cast<int>(integer());
            else if (key == "amplitude") c.gradient_check.amplitude = num();
            else if (key == "seed") c.gradient_check.seed = static_cast<unsigned>(integer());
            else ok = false;
        }
        if (!ok) throw ConfigError("line " + std::to_string(line) + ": unknown key '" + full + "'");
    }
    c.validate();
    return c;
}

inline RunConfig parse_config(const std::string& text) {
    std::istringstream is(text);
    return parse_config(is);
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config '" + path + "'");
    try {
        return parse_config(is);
    } catch (const ParseError& e) {
        throw ParseError(path + ": " + e.what(), e.line());
    }
}

/// Writes every key, so that parse_config(write_config(c)) reproduces c.
inline std::string write_config(const RunConfig& c) {
    using detail::format_complex;
    using detail::format_double;
    const char* entries[] = {"xx", "xy", "yx", "yy"};
    std::ostringstream os;
    os << "[geometry]\n";
    os << "radius = " << format_double(c.geometry.radius) << "\n";
    os << "refinements = " << c.geometry.refinements << "\n";
    if (!c.geometry.mesh.empty()) os << "mesh = " << c.geometry.mesh << "\n";
    os << "\n[material]\n";
    os << "omega = " << format_double(c.material.omega) << "\n";
    os << "omega_p = " << format_double(c.material.omega_p) << "\n";
    os << "tau = " << format_double(c.material.tau) << "\n";
    for (int i = 0; i < 4; ++i) os << "eps_" << entries[i] << " = " << format_complex(c.material.eps(i / 2, i % 2)) << "\n";
    os << "\n[cost]\n";
    for (int i = 0; i < 4; ++i)
        os << "target_" << entries[i] << " = " << format_complex(c.cost.target(i / 2, i % 2)) << "\n";
    os << "alpha = " << format_double(c.cost.alpha) << "\n";
    os << "alpha_sigma = " << format_double(c.cost.alpha_sigma) << "\n";
    os << "beta = " << format_double(c.cost.beta) << "\n";
    if (c.has_schedule) os << "schedule = " << format_schedule(c.schedule) << "\n";
    os << "\n[optimizer]\n";
    os << "max_steps = " << c.optimizer.max_steps << "\n";
    os << "tolerance = " << format_double(c.optimizer.tolerance) << "\n";
    os << "armijo_shrink = " << format_double(c.optimizer.armijo.shrink) << "\n";
    os << "armijo_gamma = " << format_double(c.optimizer.armijo.sufficient) << "\n";
    os << "history_cap = " << (c.optimizer.history_cap ? *c.optimizer.history_cap : 0) << "\n";
    os << "\n[output]\n";
    os << "directory = " << c.output.directory << "\n";
    os << "vtk_every = " << c.output.vtk_every << "\n";
    os << "log_format = " << c.output.log_format << "\n";
    if (!c.deformation.empty()) os << "\n[input]\ndeformation = " << c.deformation << "\n";
    os << "\n[gradient_check]\n";
    os << "directions = " << c.gradient_check.directions << "\n";
    os << "amplitude = " << format_double(c.gradient_check.amplitude) << "\n";
    os << "seed = " << c.gradient_check.seed << "\n";
    return os.str();
}

} // namespace cellopt
