#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "p2rec/augment.hpp"
#include "p2rec/backbone.hpp"
#include "p2rec/dataset.hpp"
#include "p2rec/proxy_lm.hpp"

namespace p2rec {

// Flat dotted-key configuration for the whole pipeline. Every key has a
// default; unknown keys are rejected rather than ignored.
struct PipelineConfig {
    uint64_t seed = 1;
    std::string out_dir = "out";

    std::string data_source = "synthetic";  // "synthetic" | "tsv"
    std::string data_path;                  // TSV path when data.source=tsv
    SyntheticSpec synth;

    BackboneConfig backbone;

    int32_t pregroup_k = 16;
    int pregroup_restarts = 5;
    int pregroup_max_iters = 300;
    bool pregroup_count_distinct = false;

    ProxyConfig proxy;
    bool proxy_random_base = false;  // skip base pretraining, freeze random weights

    FusionConfig fusion;

    std::vector<int> eval_ks = {5, 10};
    bool eval_mask_history = true;
    int eval_buckets = 5;
};

// Parses `key=value` lines; '#' starts a comment, blank lines are skipped.
// A `preset=<name>` line is applied before all other keys regardless of
// position. Throws ConfigError on unknown keys or malformed values.
PipelineConfig parse_config_text(const std::string& text);

// Same parsing applied on top of an existing config (used by the CLI to
// layer preset, file, and per-key overrides in that order).
void apply_config_text(PipelineConfig& cfg, const std::string& text);

PipelineConfig load_config_file(const std::string& path);

// Single key override (CLI --set key=value).
void apply_override(PipelineConfig& cfg, const std::string& key, const std::string& value);

// Named bundles of settings: "desk" (the defaults) and "paper-scale".
void apply_preset(PipelineConfig& cfg, const std::string& name);

// Environment hook: P2REC_OUT, when set, replaces out_dir.
void apply_env_overrides(PipelineConfig& cfg);

// Sorted key=value lines covering every key; hashing this text gives the
// config identity stamped into artifacts.
std::string canonical_config(const PipelineConfig& cfg);
uint64_t config_hash(const PipelineConfig& cfg);

// Cross-field checks that individual setters cannot perform.
void validate_config(const PipelineConfig& cfg);

}  // namespace p2rec
