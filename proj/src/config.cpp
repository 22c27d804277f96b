#include "p2rec/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "p2rec/common.hpp"

namespace p2rec {

namespace {

int64_t parse_int(const std::string& key, const std::string& s) {
    int64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
        throw ConfigError(format("config key %s: '%s' is not an integer", key.c_str(), s.c_str()));
    return v;
}

uint64_t parse_u64(const std::string& key, const std::string& s) {
    uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
        throw ConfigError(
            format("config key %s: '%s' is not an unsigned integer", key.c_str(), s.c_str()));
    return v;
}

double parse_double(const std::string& key, const std::string& s) {
    try {
        size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(format("config key %s: '%s' is not a number", key.c_str(), s.c_str()));
    }
}

bool parse_bool(const std::string& key, const std::string& s) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError(format("config key %s: '%s' is not a boolean", key.c_str(), s.c_str()));
}

std::vector<int> parse_int_list(const std::string& key, const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ','))
        out.push_back(static_cast<int>(parse_int(key, part)));
    if (out.empty()) throw ConfigError(format("config key %s: empty list", key.c_str()));
    return out;
}

std::string fmt_double(double v) { return format("%.17g", v); }

std::string fmt_int_list(const std::vector<int>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(v[i]);
    }
    return out;
}

struct Entry {
    std::function<void(PipelineConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const PipelineConfig&)> get;
};

const std::map<std::string, Entry>& schema() {
    static const std::map<std::string, Entry> s = [] {
        std::map<std::string, Entry> m;
        auto add = [&](const std::string& key, auto setter, auto getter) {
            m[key] = Entry{setter, getter};
        };

        add("seed",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.seed = parse_u64(k, v);
            },
            [](const PipelineConfig& c) { return std::to_string(c.seed); });
        add("out_dir",
            [](PipelineConfig& c, const std::string&, const std::string& v) { c.out_dir = v; },
            [](const PipelineConfig& c) { return c.out_dir; });

        add("data.source",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                if (v != "synthetic" && v != "tsv")
                    throw ConfigError(format("config key %s: expected synthetic|tsv", k.c_str()));
                c.data_source = v;
            },
            [](const PipelineConfig& c) { return c.data_source; });
        add("data.path",
            [](PipelineConfig& c, const std::string&, const std::string& v) { c.data_path = v; },
            [](const PipelineConfig& c) { return c.data_path; });
        add("data.users",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.synth.num_users = static_cast<int32_t>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.synth.num_users); });
        add("data.items",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.synth.num_items = static_cast<int32_t>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.synth.num_items); });
        add("data.categories",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.synth.num_categories = static_cast<int32_t>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.synth.num_categories); });
        add("data.alpha",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.synth.alpha = parse_double(k, v);
            },
            [](const PipelineConfig& c) { return fmt_double(c.synth.alpha); });
        add("data.seq_min",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.synth.seq_len_min = static_cast<int32_t>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.synth.seq_len_min); });
        add("data.seq_max",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.synth.seq_len_max = static_cast<int32_t>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.synth.seq_len_max); });
        add("data.corruption",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.synth.corruption_rate = parse_double(k, v);
            },
            [](const PipelineConfig& c) { return fmt_double(c.synth.corruption_rate); });

        add("backbone.arch",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                if (v == "self_attention")
                    c.backbone.arch = BackboneArch::self_attention;
                else if (v == "recurrent")
                    c.backbone.arch = BackboneArch::recurrent;
                else
                    throw ConfigError(
                        format("config key %s: expected self_attention|recurrent", k.c_str()));
            },
            [](const PipelineConfig& c) {
                return c.backbone.arch == BackboneArch::self_attention
                           ? std::string("self_attention")
                           : std::string("recurrent");
            });
        add("backbone.d",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.backbone.d = static_cast<size_t>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.backbone.d); });
        add("backbone.layers",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.backbone.n_layers = static_cast<size_t>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.backbone.n_layers); });
        add("backbone.heads",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.backbone.n_heads = static_cast<size_t>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.backbone.n_heads); });
        add("backbone.max_seq_len",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.backbone.max_seq_len = static_cast<size_t>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.backbone.max_seq_len); });
        add("backbone.dropout",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.backbone.dropout = parse_double(k, v);
            },
            [](const PipelineConfig& c) { return fmt_double(c.backbone.dropout); });
        add("backbone.lr",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.backbone.lr = parse_double(k, v);
            },
            [](const PipelineConfig& c) { return fmt_double(c.backbone.lr); });
        add("backbone.batch",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.backbone.batch_size = static_cast<size_t>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.backbone.batch_size); });
        add("backbone.epochs",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.backbone.max_epochs = static_cast<int>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.backbone.max_epochs); });
        add("backbone.patience",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.backbone.patience = static_cast<int>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.backbone.patience); });

        add("pregroup.k",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.pregroup_k = static_cast<int32_t>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.pregroup_k); });
        add("pregroup.restarts",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.pregroup_restarts = static_cast<int>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.pregroup_restarts); });
        add("pregroup.max_iters",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.pregroup_max_iters = static_cast<int>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.pregroup_max_iters); });
        add("pregroup.count_distinct",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.pregroup_count_distinct = parse_bool(k, v);
            },
            [](const PipelineConfig& c) {
                return c.pregroup_count_distinct ? std::string("true") : std::string("false");
            });

        add("proxy.d_model",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.proxy.d_model = static_cast<size_t>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.proxy.d_model); });
        add("proxy.layers",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.proxy.n_layers = static_cast<size_t>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.proxy.n_layers); });
        add("proxy.heads",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.proxy.n_heads = static_cast<size_t>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.proxy.n_heads); });
        add("proxy.ffn_mult",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.proxy.ffn_mult = static_cast<size_t>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.proxy.ffn_mult); });
        add("proxy.max_prompt_len",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.proxy.max_prompt_len = static_cast<size_t>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.proxy.max_prompt_len); });
        add("proxy.dropout",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.proxy.dropout = parse_double(k, v);
            },
            [](const PipelineConfig& c) { return fmt_double(c.proxy.dropout); });
        add("proxy.batch",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.proxy.batch_size = static_cast<size_t>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.proxy.batch_size); });
        add("proxy.pretrain_epochs",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.proxy.pretrain_epochs = static_cast<int>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.proxy.pretrain_epochs); });
        add("proxy.pretrain_lr",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.proxy.pretrain_lr = parse_double(k, v);
            },
            [](const PipelineConfig& c) { return fmt_double(c.proxy.pretrain_lr); });
        add("proxy.random_base",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.proxy_random_base = parse_bool(k, v);
            },
            [](const PipelineConfig& c) {
                return c.proxy_random_base ? std::string("true") : std::string("false");
            });

        add("lora.rank",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.proxy.lora_rank = static_cast<size_t>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.proxy.lora_rank); });
        add("lora.alpha",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.proxy.lora_alpha = parse_double(k, v);
            },
            [](const PipelineConfig& c) { return fmt_double(c.proxy.lora_alpha); });
        add("lora.freeze_proj",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.proxy.freeze_proj = parse_bool(k, v);
            },
            [](const PipelineConfig& c) {
                return c.proxy.freeze_proj ? std::string("true") : std::string("false");
            });

        add("sft.lr",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.proxy.sft_lr = parse_double(k, v);
            },
            [](const PipelineConfig& c) { return fmt_double(c.proxy.sft_lr); });
        add("sft.epochs",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.proxy.sft_max_epochs = static_cast<int>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.proxy.sft_max_epochs); });
        add("sft.patience",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.proxy.sft_patience = static_cast<int>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.proxy.sft_patience); });
        add("sft.holdout_fraction",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.proxy.holdout_fraction = parse_double(k, v);
            },
            [](const PipelineConfig& c) { return fmt_double(c.proxy.holdout_fraction); });
        add("sft.mean_reduction",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.proxy.mean_over_users = parse_bool(k, v);
            },
            [](const PipelineConfig& c) {
                return c.proxy.mean_over_users ? std::string("true") : std::string("false");
            });

        add("fusion.mode",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                if (v == "gate_concat")
                    c.fusion.mode = FusionMode::gate_concat;
                else if (v == "gate_scalar")
                    c.fusion.mode = FusionMode::gate_scalar;
                else if (v == "sum")
                    c.fusion.mode = FusionMode::sum;
                else
                    throw ConfigError(
                        format("config key %s: expected gate_concat|gate_scalar|sum", k.c_str()));
            },
            [](const PipelineConfig& c) {
                switch (c.fusion.mode) {
                    case FusionMode::gate_concat: return std::string("gate_concat");
                    case FusionMode::gate_scalar: return std::string("gate_scalar");
                    default: return std::string("sum");
                }
            });
        add("fusion.gate",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                if (v == "learned")
                    c.fusion.gate = GateOverride::learned;
                else if (v == "always_id")
                    c.fusion.gate = GateOverride::always_id;
                else if (v == "always_knowledge")
                    c.fusion.gate = GateOverride::always_knowledge;
                else
                    throw ConfigError(format(
                        "config key %s: expected learned|always_id|always_knowledge", k.c_str()));
            },
            [](const PipelineConfig& c) {
                switch (c.fusion.gate) {
                    case GateOverride::learned: return std::string("learned");
                    case GateOverride::always_id: return std::string("always_id");
                    default: return std::string("always_knowledge");
                }
            });
        add("fusion.tie_output",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.fusion.tie_output = parse_bool(k, v);
            },
            [](const PipelineConfig& c) {
                return c.fusion.tie_output ? std::string("true") : std::string("false");
            });

        add("eval.ks",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.eval_ks = parse_int_list(k, v);
            },
            [](const PipelineConfig& c) { return fmt_int_list(c.eval_ks); });
        add("eval.mask_history",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.eval_mask_history = parse_bool(k, v);
            },
            [](const PipelineConfig& c) {
                return c.eval_mask_history ? std::string("true") : std::string("false");
            });
        add("eval.buckets",
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                c.eval_buckets = static_cast<int>(parse_int(k, v));
            },
            [](const PipelineConfig& c) { return std::to_string(c.eval_buckets); });
        return m;
    }();
    return s;
}

}  // namespace

void apply_override(PipelineConfig& cfg, const std::string& key, const std::string& value) {
    auto it = schema().find(key);
    if (it == schema().end()) throw ConfigError("unknown config key: " + key);
    it->second.set(cfg, key, value);
}

void apply_preset(PipelineConfig& cfg, const std::string& name) {
    if (name == "desk") {
        return;  // defaults are the desk-scale settings
    }
    if (name == "paper-scale") {
        // The published training setup; everything else keeps desk defaults.
        apply_override(cfg, "backbone.d", "256");
        apply_override(cfg, "backbone.batch", "1024");
        apply_override(cfg, "backbone.lr", "1e-4");
        return;
    }
    throw ConfigError("unknown preset: " + name);
}

void apply_config_text(PipelineConfig& cfg, const std::string& text) {
    // preset first, remaining keys in file order
    std::vector<std::pair<std::string, std::string>> kvs;
    std::string preset;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        size_t b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        size_t e = line.find_last_not_of(" \t\r");
        line = line.substr(b, e - b + 1);
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(format("config line %d: expected key=value, got '%s'", lineno,
                                     line.c_str()));
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        auto strip = [](std::string& s) {
            size_t b2 = s.find_first_not_of(" \t");
            size_t e2 = s.find_last_not_of(" \t");
            s = b2 == std::string::npos ? std::string() : s.substr(b2, e2 - b2 + 1);
        };
        strip(key);
        strip(val);
        if (key == "preset") {
            preset = val;
            continue;
        }
        kvs.emplace_back(key, val);
    }
    if (!preset.empty()) apply_preset(cfg, preset);
    for (const auto& [k, v] : kvs) apply_override(cfg, k, v);
}

PipelineConfig parse_config_text(const std::string& text) {
    PipelineConfig cfg;
    apply_config_text(cfg, text);
    return cfg;
}

PipelineConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

void apply_env_overrides(PipelineConfig& cfg) {
    if (const char* out = std::getenv("P2REC_OUT"); out && *out) cfg.out_dir = out;
}

std::string canonical_config(const PipelineConfig& cfg) {
    std::string out;
    for (const auto& [key, entry] : schema()) {
        // out_dir is where artifacts land, not what gets computed; keeping it
        // out of the canonical form lets runs in different directories share
        // one identity and stay resume-compatible.
        if (key == "out_dir") continue;
        out += key;
        out += '=';
        out += entry.get(cfg);
        out += '\n';
    }
    return out;
}

uint64_t config_hash(const PipelineConfig& cfg) { return fnv1a64(canonical_config(cfg)); }

void validate_config(const PipelineConfig& cfg) {
    if (cfg.data_source == "tsv" && cfg.data_path.empty())
        throw ConfigError("data.source=tsv requires data.path");
    if (cfg.synth.seq_len_min < 3)
        throw ConfigError("data.seq_min must be at least 3 for the leave-one-out split");
    if (cfg.synth.seq_len_max < cfg.synth.seq_len_min)
        throw ConfigError("data.seq_max must be >= data.seq_min");
    if (cfg.backbone.d == 0 || cfg.backbone.n_heads == 0 ||
        cfg.backbone.d % cfg.backbone.n_heads != 0)
        throw ConfigError("backbone.d must be a positive multiple of backbone.heads");
    if (cfg.proxy.d_model == 0 || cfg.proxy.n_heads == 0 ||
        cfg.proxy.d_model % cfg.proxy.n_heads != 0)
        throw ConfigError("proxy.d_model must be a positive multiple of proxy.heads");
    if (cfg.pregroup_k <= 0) throw ConfigError("pregroup.k must be positive");
    if (cfg.proxy.lora_rank == 0) throw ConfigError("lora.rank must be positive");
    if (cfg.proxy.holdout_fraction < 0.0 || cfg.proxy.holdout_fraction >= 1.0)
        throw ConfigError("sft.holdout_fraction must be in [0, 1)");
    if (cfg.eval_buckets <= 0) throw ConfigError("eval.buckets must be positive");
    for (int k : cfg.eval_ks)
        if (k <= 0) throw ConfigError("eval.ks entries must be positive");
    if (cfg.proxy.max_prompt_len < 20)
        throw ConfigError("proxy.max_prompt_len must be at least 20 to fit a prompt");
}

}  // namespace p2rec
