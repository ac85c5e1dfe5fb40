#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "sfuse/common.hpp"

namespace sfuse {

constexpr int kDimLayers = 4;  // depth of each cross-attention stack

// Flat run configuration. Desk-scale defaults; the paper-scale preset only
// changes C / head counts / S through the same knobs.
struct TrainConfig {
    int S = 16;             // sub-volume side
    int P = 2;              // patch side
    int C = 8;              // embedding width
    int dim_base_heads = 1; // heads at DIM layer 0; layer l has base*2^l
    std::string dim_fuse = "mean";  // or "sum"
    int enc_stages = 2;
    int enc_depth = 2;      // blocks per stage (regular, shifted, ...)
    int enc_window = 2;
    int enc_base_heads = 1;
    int c_proj = 32;        // contrastive projection width
    int n_classes = 3;      // label classes (decoder emits n_classes+1 maps)

    double lr_base = 4e-4;
    double weight_decay = 1e-5;
    int warmup_steps = 500;
    int total_steps = 500;
    int batch_size = 2;
    std::uint64_t seed = 0;
    int jsd_sign = -1;      // Eq. 4 subtracts the divergence term
    double tau = 0.1;
    double cutout_fmin = 0.1;
    double cutout_fmax = 0.3;
    int kde_max_samples = 64;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int log_dice_every = 50;

    int tokens_per_axis() const { return S / P; }

    // warmup shrinks on short desk-scale runs so the ramp stays meaningful
    int effective_warmup() const {
        if (total_steps < 2500) return std::min(warmup_steps, total_steps / 5);
        return warmup_steps;
    }

    int dim_width(int layer) const { return C << layer; }
    int dim_heads(int layer) const { return dim_base_heads << layer; }
    int enc_width(int stage) const { return C << stage; }
    int enc_heads(int stage) const { return enc_base_heads << stage; }

    void validate() const {
        if (S < 1 || P < 1 || S % P != 0)
            throw ConfigError("S must be a positive multiple of P (S=" + std::to_string(S) +
                              ", P=" + std::to_string(P) + ")");
        if (C < 1) throw ConfigError("C must be >= 1");
        if (dim_base_heads < 1 || C % dim_base_heads != 0)
            throw ConfigError("C=" + std::to_string(C) + " not divisible by dim_base_heads=" +
                              std::to_string(dim_base_heads));
        if (enc_base_heads < 1 || C % enc_base_heads != 0)
            throw ConfigError("C=" + std::to_string(C) + " not divisible by enc_base_heads=" +
                              std::to_string(enc_base_heads));
        if (enc_stages < 1 || enc_depth < 1) throw ConfigError("encoder needs >= 1 stage and depth");
        if (dim_fuse != "mean" && dim_fuse != "sum")
            throw ConfigError("dim_fuse must be 'mean' or 'sum', got '" + dim_fuse + "'");
        int extent = tokens_per_axis();
        for (int s = 0; s < enc_stages; ++s) {
            if (extent < enc_window || extent % enc_window != 0)
                throw ConfigError("token grid extent " + std::to_string(extent) + " at stage " +
                                  std::to_string(s) + " not divisible by window " +
                                  std::to_string(enc_window));
            if (s + 1 < enc_stages) {
                if (extent % 2 != 0)
                    throw ConfigError("token grid extent " + std::to_string(extent) +
                                      " at stage " + std::to_string(s) + " not mergeable");
                extent /= 2;
            }
        }
        if (lr_base <= 0) throw ConfigError("lr_base must be > 0");
        if (effective_warmup() > total_steps)
            throw ConfigError("warmup_steps exceeds total_steps");
        if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (tau <= 0) throw ConfigError("tau must be > 0");
        if (!(0.0 <= cutout_fmin && cutout_fmin <= cutout_fmax && cutout_fmax < 1.0))
            throw ConfigError("cutout fraction bounds must satisfy 0 <= fmin <= fmax < 1");
        if (jsd_sign != 1 && jsd_sign != -1) throw ConfigError("jsd_sign must be +1 or -1");
        if (kde_max_samples < 2) throw ConfigError("kde_max_samples must be >= 2");
        if (c_proj < 1) throw ConfigError("c_proj must be >= 1");
        if (n_classes < 1) throw ConfigError("n_classes must be >= 1");
    }
};

namespace detail {

struct ConfigField {
    const char* name;
    std::variant<int TrainConfig::*, std::uint64_t TrainConfig::*, double TrainConfig::*,
                 std::string TrainConfig::*>
        member;
};

inline const std::vector<ConfigField>& config_fields() {
    static const std::vector<ConfigField> fields = {
        {"S", &TrainConfig::S},
        {"P", &TrainConfig::P},
        {"C", &TrainConfig::C},
        {"dim_base_heads", &TrainConfig::dim_base_heads},
        {"dim_fuse", &TrainConfig::dim_fuse},
        {"enc_stages", &TrainConfig::enc_stages},
        {"enc_depth", &TrainConfig::enc_depth},
        {"enc_window", &TrainConfig::enc_window},
        {"enc_base_heads", &TrainConfig::enc_base_heads},
        {"c_proj", &TrainConfig::c_proj},
        {"n_classes", &TrainConfig::n_classes},
        {"lr_base", &TrainConfig::lr_base},
        {"weight_decay", &TrainConfig::weight_decay},
        {"warmup_steps", &TrainConfig::warmup_steps},
        {"total_steps", &TrainConfig::total_steps},
        {"batch_size", &TrainConfig::batch_size},
        {"seed", &TrainConfig::seed},
        {"jsd_sign", &TrainConfig::jsd_sign},
        {"tau", &TrainConfig::tau},
        {"cutout_fmin", &TrainConfig::cutout_fmin},
        {"cutout_fmax", &TrainConfig::cutout_fmax},
        {"kde_max_samples", &TrainConfig::kde_max_samples},
        {"adam_beta1", &TrainConfig::adam_beta1},
        {"adam_beta2", &TrainConfig::adam_beta2},
        {"adam_eps", &TrainConfig::adam_eps},
        {"log_dice_every", &TrainConfig::log_dice_every},
    };
    return fields;
}

// shortest decimal that parses back to the same double
inline std::string format_double(double v) {
    char buf[40];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        if (std::stod(buf) == v) break;
    }
    return buf;
}

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

inline std::string config_value(const TrainConfig& cfg, const detail::ConfigField& f) {
    return std::visit(
        [&cfg](auto member) -> std::string {
            const auto& v = cfg.*member;
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, std::string>)
                return v;
            else if constexpr (std::is_same_v<T, double>)
                return detail::format_double(v);
            else
                return std::to_string(v);
        },
        f.member);
}

inline void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& f : detail::config_fields()) {
        if (key != f.name) continue;
        try {
            std::visit(
                [&cfg, &value](auto member) {
                    auto& v = cfg.*member;
                    using T = std::decay_t<decltype(v)>;
                    if constexpr (std::is_same_v<T, std::string>)
                        v = value;
                    else if constexpr (std::is_same_v<T, double>)
                        v = std::stod(value);
                    else if constexpr (std::is_same_v<T, std::uint64_t>)
                        v = std::stoull(value);
                    else
                        v = std::stoi(value);
                },
                f.member);
            return;
        } catch (const std::exception&) {
            throw ConfigError("bad value '" + value + "' for config key '" + key + "'");
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

// key=value per line, '#' starts a comment, unknown keys are errors
inline TrainConfig parse_config_text(const std::string& text, TrainConfig base = {}) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + " is not key=value: '" +
                              line + "'");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        set_config_value(base, key, value);
    }
    return base;
}

inline TrainConfig load_config_file(const std::string& path, TrainConfig base = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_config_text(text, base);
}

// canonical key=value lines, sorted by key
inline std::string canonical_config_text(const TrainConfig& cfg) {
    std::map<std::string, std::string> kv;
    for (const auto& f : detail::config_fields()) kv[f.name] = config_value(cfg, f);
    std::string out;
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
}

// The architecture subset determines whether checkpoint tensors fit the
// model. S is excluded on purpose: no parameter shape depends on it.
inline std::string architecture_config_text(const TrainConfig& cfg) {
    static const char* arch_keys[] = {"P",          "C",          "dim_base_heads", "dim_fuse",
                                      "enc_stages", "enc_depth",  "enc_window",     "enc_base_heads",
                                      "c_proj",     "n_classes"};
    std::map<std::string, std::string> kv;
    for (const auto& f : detail::config_fields())
        for (const char* k : arch_keys)
            if (std::string(k) == f.name) kv[f.name] = config_value(cfg, f);
    std::string out;
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
}

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t config_fingerprint(const TrainConfig& cfg) {
    return fnv1a64(architecture_config_text(cfg));
}

}  // namespace sfuse
