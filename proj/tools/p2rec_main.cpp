#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "p2rec/config.hpp"
#include "p2rec/optim.hpp"
#include "p2rec/pipeline.hpp"

using json = nlohmann::json;
using namespace p2rec;

namespace {

void log_event(const json& j) { std::fprintf(stderr, "%s\n", j.dump().c_str()); }

struct CommonOpts {
    std::string config_path;
    std::string preset;
    std::string out_dir;
    std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "Config file with key=value lines");
    cmd->add_option("--preset", o.preset,
                    "Named preset (desk | paper-scale), applied before the config file");
    cmd->add_option("--set", o.sets, "Single key override, key=value; repeatable, applied last");
    cmd->add_option("--out", o.out_dir, "Output directory (shorthand for --set out_dir=...)");
}

PipelineConfig build_config(const CommonOpts& o) {
    PipelineConfig cfg;
    if (!o.preset.empty()) apply_preset(cfg, o.preset);
    if (!o.config_path.empty()) {
        std::ifstream in(o.config_path);
        if (!in) throw ConfigError("cannot open config file: " + o.config_path);
        std::stringstream ss;
        ss << in.rdbuf();
        apply_config_text(cfg, ss.str());
    }
    for (const std::string& kv : o.sets) {
        auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--set expects key=value, got: " + kv);
        apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
    return cfg;
}

void run_stages(PipelineConfig cfg, Stage from, bool single) {
    PipelineContext ctx = make_context(std::move(cfg));
    log_event({{"event", "run_start"},
               {"out_dir", ctx.out_dir},
               {"config_hash", format("%016llx", static_cast<unsigned long long>(ctx.cfg_hash))},
               {"users", ctx.data.num_users},
               {"items", ctx.data.num_items}});
    const Stage order[] = {Stage::pretrain, Stage::pregroup,    Stage::sft,  Stage::augment,
                           Stage::train_fused, Stage::eval, Stage::report};
    bool started = false;
    for (Stage s : order) {
        if (s == from) started = true;
        if (!started) continue;
        log_event({{"event", "stage_start"}, {"stage", stage_name(s)}});
        auto t0 = std::chrono::steady_clock::now();
        run_stage(ctx, s);
        double secs = std::chrono::duration_cast<std::chrono::duration<double>>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
        log_event({{"event", "stage_done"}, {"stage", stage_name(s)}, {"seconds", secs}});
        if (single) break;
    }
    log_event({{"event", "run_done"}});
}

int guarded(const std::function<void()>& fn) {
    try {
        fn();
        return 0;
    } catch (const ConfigError& e) {
        log_event({{"event", "error"}, {"kind", "config"}, {"message", e.what()}});
        return 2;
    } catch (const ParseError& e) {
        log_event({{"event", "error"}, {"kind", "config"}, {"message", e.what()}});
        return 2;
    } catch (const std::exception& e) {
        log_event({{"event", "error"}, {"kind", "stage"}, {"message", e.what()}});
        return 3;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Preference-parsing two-stage pipeline for sequential recommendation"};
    app.require_subcommand(1);
    std::function<void()> action;

    CommonOpts run_opts;
    std::string from_stage;
    CLI::App* run = app.add_subcommand("run", "Run all stages in order");
    add_common(run, run_opts);
    run->add_option("--from-stage", from_stage,
                    "Resume from this stage, reusing earlier artifacts");
    run->callback([&]() {
        action = [&]() {
            Stage from = from_stage.empty() ? Stage::pretrain : parse_stage(from_stage);
            run_stages(build_config(run_opts), from, false);
        };
    });

    struct StageCmd {
        const char* name;
        const char* help;
        Stage stage;
    };
    const StageCmd stage_cmds[] = {
        {"pretrain", "Train the plain backbone and export item embeddings", Stage::pretrain},
        {"pregroup", "Cluster item embeddings and build preference targets", Stage::pregroup},
        {"sft", "Adapt the proxy language model to user preference targets", Stage::sft},
        {"augment", "Extract knowledge embeddings for every item", Stage::augment},
        {"train-fused", "Train the backbone with the fused item table", Stage::train_fused},
        {"eval", "Rank the held-out items with both backbones", Stage::eval},
        {"report", "Assemble the report files from prior stage outputs", Stage::report},
    };
    std::vector<CommonOpts> stage_opts(std::size(stage_cmds));
    static std::string pregroup_k, embeddings_path, eval_model, eval_out;
    static std::vector<std::string> compare_paths;
    for (size_t i = 0; i < std::size(stage_cmds); ++i) {
        CLI::App* cmd = app.add_subcommand(stage_cmds[i].name, stage_cmds[i].help);
        add_common(cmd, stage_opts[i]);
        Stage st = stage_cmds[i].stage;
        CommonOpts* opts = &stage_opts[i];
        if (st == Stage::pregroup) {
            cmd->add_option("--k", pregroup_k, "Group count (shorthand for --set pregroup.k=...)");
            cmd->add_option("--embeddings", embeddings_path,
                            "Item embedding artifact to cluster, replacing the one in --out");
            cmd->callback([&, opts]() {
                action = [&, opts]() {
                    PipelineConfig cfg = build_config(*opts);
                    if (!pregroup_k.empty()) apply_override(cfg, "pregroup.k", pregroup_k);
                    PipelineContext ctx = make_context(std::move(cfg));
                    if (!embeddings_path.empty())
                        ctx.input_overrides[artifact_file::item_embeddings] = embeddings_path;
                    log_event({{"event", "stage_start"}, {"stage", "pregroup"}});
                    run_stage(ctx, Stage::pregroup);
                    log_event({{"event", "stage_done"}, {"stage", "pregroup"}});
                };
            });
        } else if (st == Stage::eval) {
            cmd->add_option("--model", eval_model,
                            "Evaluate only this checkpoint; writes one eval fragment");
            cmd->add_option("--out-file", eval_out,
                            "Fragment path for --model (default <out>/eval_<stem>.json)");
            cmd->callback([&, opts]() {
                action = [&, opts]() {
                    PipelineConfig cfg = build_config(*opts);
                    if (eval_model.empty()) {
                        run_stages(std::move(cfg), Stage::eval, true);
                        return;
                    }
                    PipelineContext ctx = make_context(std::move(cfg));
                    std::string out = eval_out;
                    if (out.empty()) {
                        std::string stem = eval_model;
                        if (auto slash = stem.find_last_of("/\\"); slash != std::string::npos)
                            stem = stem.substr(slash + 1);
                        if (auto dot = stem.find_last_of('.'); dot != std::string::npos)
                            stem = stem.substr(0, dot);
                        out = ctx.out_dir + "/eval_" + stem + ".json";
                    }
                    log_event({{"event", "stage_start"}, {"stage", "eval"}});
                    run_eval_single(ctx, eval_model, out);
                    log_event({{"event", "stage_done"}, {"stage", "eval"}, {"fragment", out}});
                };
            });
        } else if (st == Stage::report) {
            cmd->add_option("--compare", compare_paths,
                            "Compare two evaluation JSON files instead of reporting")
                ->expected(2);
            cmd->callback([&, opts]() {
                action = [&, opts]() {
                    if (compare_paths.size() == 2) {
                        std::printf("%s\n", compare_evals(compare_paths[0],
                                                          compare_paths[1]).c_str());
                        return;
                    }
                    run_stages(build_config(*opts), Stage::report, true);
                };
            });
        } else {
            cmd->callback([&, opts, st]() {
                action = [&, opts, st]() { run_stages(build_config(*opts), st, true); };
            });
        }
    }

    CommonOpts show_opts;
    CLI::App* show = app.add_subcommand("show-config",
                                        "Print the resolved configuration and its hash");
    add_common(show, show_opts);
    show->callback([&]() {
        action = [&]() {
            PipelineConfig cfg = build_config(show_opts);
            apply_env_overrides(cfg);
            validate_config(cfg);
            std::printf("%s", canonical_config(cfg).c_str());
            std::printf("# hash=%016llx\n",
                        static_cast<unsigned long long>(config_hash(cfg)));
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    return guarded(action);
}
