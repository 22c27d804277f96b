// Config parsing, canonicalization, validation, resume guards, and the
// command-line surface of the p2rec binary (driven through std::system).

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "p2rec/common.hpp"
#include "p2rec/config.hpp"
#include "p2rec/pipeline.hpp"

using namespace p2rec;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string temp_dir(const std::string& tag) {
    std::string dir = "/tmp/p2rec_cfg_" + tag + "_" + std::to_string(::getpid());
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Small enough that a full seven-stage run finishes in a few seconds.
PipelineConfig tiny_pipeline_cfg(const std::string& out) {
    PipelineConfig cfg;
    cfg.out_dir = out;
    cfg.seed = 77;
    cfg.synth.num_users = 24;
    cfg.synth.num_items = 12;
    cfg.synth.num_categories = 3;
    cfg.synth.seq_len_min = 5;
    cfg.synth.seq_len_max = 8;
    cfg.synth.alpha = 5.0;
    cfg.backbone.d = 8;
    cfg.backbone.n_layers = 1;
    cfg.backbone.n_heads = 2;
    cfg.backbone.max_seq_len = 10;
    cfg.backbone.dropout = 0.0;
    cfg.backbone.max_epochs = 2;
    cfg.backbone.patience = 2;
    cfg.pregroup_k = 3;
    cfg.pregroup_restarts = 2;
    cfg.pregroup_max_iters = 50;
    cfg.proxy.d_model = 16;
    cfg.proxy.n_layers = 1;
    cfg.proxy.n_heads = 2;
    cfg.proxy.ffn_mult = 2;
    cfg.proxy.max_prompt_len = 24;
    cfg.proxy.batch_size = 8;
    cfg.proxy.pretrain_epochs = 1;
    cfg.proxy.sft_max_epochs = 2;
    cfg.proxy.sft_patience = 2;
    cfg.eval_ks = {1, 5};
    cfg.eval_buckets = 2;
    return cfg;
}

std::string message_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const std::exception& e) {
        return e.what();
    }
    return "";
}

const char* cli_binary() { return std::getenv("P2REC_BIN"); }

int run_cli(const std::string& args) {
    std::string cmd = std::string(cli_binary()) + " " + args;
    int rc = std::system(cmd.c_str());
    if (rc == -1) return -1;
    return WEXITSTATUS(rc);
}

// One set of overrides shared by every CLI invocation that touches artifacts;
// reruns must present the identical config or the stage guards reject them.
const std::string kTinySets =
    " --set seed=5 --set data.users=48 --set data.items=24 --set data.categories=3"
    " --set data.seq_min=5 --set data.seq_max=8"
    " --set backbone.d=16 --set backbone.layers=1 --set backbone.heads=2"
    " --set backbone.dropout=0 --set backbone.epochs=2 --set backbone.patience=2"
    " --set proxy.d_model=32 --set proxy.layers=1 --set proxy.heads=2"
    " --set proxy.ffn_mult=2 --set proxy.max_prompt_len=30 --set proxy.batch=16"
    " --set proxy.pretrain_epochs=1 --set sft.epochs=2 --set pregroup.k=4";

}  // namespace

TEST_CASE("canonical form round-trips through the parser unchanged") {
    PipelineConfig cfg;
    cfg.synth.alpha = 3.7;
    cfg.backbone.lr = 2.5e-4;
    cfg.eval_ks = {1, 5, 20};
    cfg.fusion.mode = FusionMode::gate_scalar;
    std::string text = canonical_config(cfg);
    PipelineConfig back = parse_config_text(text);
    CHECK(canonical_config(back) == text);
    CHECK(config_hash(back) == config_hash(cfg));
}

TEST_CASE("canonical form lists defaults and omits the output directory") {
    PipelineConfig cfg;
    cfg.out_dir = "/somewhere/else";
    std::string text = canonical_config(cfg);
    CHECK(text.find("seed=1\n") != std::string::npos);
    CHECK(text.find("data.source=synthetic\n") != std::string::npos);
    CHECK(text.find("backbone.arch=self_attention\n") != std::string::npos);
    CHECK(text.find("pregroup.k=16\n") != std::string::npos);
    CHECK(text.find("eval.ks=5,10\n") != std::string::npos);
    CHECK(text.find("fusion.mode=gate_concat\n") != std::string::npos);
    CHECK(text.find("fusion.tie_output=true\n") != std::string::npos);
    CHECK(text.find("sft.mean_reduction=true\n") != std::string::npos);
    CHECK(text.find("out_dir") == std::string::npos);
}

TEST_CASE("output directory does not affect the config identity") {
    PipelineConfig a, b;
    a.out_dir = "run_a";
    b.out_dir = "run_b";
    CHECK(config_hash(a) == config_hash(b));
    b.seed = 2;
    CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("parser handles comments, blanks, whitespace, and typed values") {
    PipelineConfig cfg = parse_config_text(
        "# full-line comment\n"
        "\n"
        "seed = 9   # trailing comment\n"
        "  data.users=33\n"
        "backbone.arch=recurrent\n"
        "fusion.mode=sum\n"
        "eval.ks=1,5,20\n"
        "pregroup.count_distinct=1\n"
        "eval.mask_history=false\n"
        "data.alpha=0.5\n");
    CHECK(cfg.seed == 9);
    CHECK(cfg.synth.num_users == 33);
    CHECK(cfg.backbone.arch == BackboneArch::recurrent);
    CHECK(cfg.fusion.mode == FusionMode::sum);
    CHECK(cfg.eval_ks == std::vector<int>{1, 5, 20});
    CHECK(cfg.pregroup_count_distinct);
    CHECK_FALSE(cfg.eval_mask_history);
    CHECK(cfg.synth.alpha == 0.5);
}

TEST_CASE("parser rejects malformed input with the offending key in the message") {
    CHECK_THROWS_AS(parse_config_text("nobody.home=1\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("just a line without equals\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("seed=abc\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("data.alpha=fast\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("eval.mask_history=maybe\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("eval.ks=\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("data.source=csv\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("backbone.arch=mamba\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("fusion.gate=coin_flip\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("preset=warp9\n"), ConfigError);

    std::string msg = message_of([] { parse_config_text("seed=abc\n"); });
    CHECK(msg.find("seed") != std::string::npos);
    CHECK(msg.find("abc") != std::string::npos);
}

TEST_CASE("presets: desk is the defaults, paper-scale changes exactly three keys") {
    PipelineConfig desk;
    apply_preset(desk, "desk");
    CHECK(config_hash(desk) == config_hash(PipelineConfig{}));

    PipelineConfig paper;
    apply_preset(paper, "paper-scale");
    CHECK(paper.backbone.d == 256);
    CHECK(paper.backbone.batch_size == 1024);
    CHECK(paper.backbone.lr == 1e-4);
    PipelineConfig expected;
    expected.backbone.d = 256;
    expected.backbone.batch_size = 1024;
    expected.backbone.lr = 1e-4;
    CHECK(config_hash(paper) == config_hash(expected));

    PipelineConfig cfg;
    CHECK_THROWS_AS(apply_preset(cfg, "industrial"), ConfigError);
}

TEST_CASE("a preset line applies before file keys regardless of position") {
    PipelineConfig cfg = parse_config_text(
        "backbone.d=32\n"
        "preset=paper-scale\n");
    CHECK(cfg.backbone.d == 32);       // file key wins over the preset
    CHECK(cfg.backbone.batch_size == 1024);  // untouched preset key survives
}

TEST_CASE("environment override replaces the output directory") {
    ::setenv("P2REC_OUT", "/tmp/p2rec_env_probe", 1);
    PipelineConfig cfg;
    cfg.out_dir = "ignored";
    apply_env_overrides(cfg);
    CHECK(cfg.out_dir == "/tmp/p2rec_env_probe");
    ::unsetenv("P2REC_OUT");
    PipelineConfig cfg2;
    cfg2.out_dir = "kept";
    apply_env_overrides(cfg2);
    CHECK(cfg2.out_dir == "kept");
}

TEST_CASE("validation rejects settings the pipeline cannot honor") {
    CHECK_NOTHROW(validate_config(PipelineConfig{}));

    auto reject = [](const std::function<void(PipelineConfig&)>& mutate) {
        PipelineConfig cfg;
        mutate(cfg);
        CHECK_THROWS_AS(validate_config(cfg), ConfigError);
    };
    reject([](PipelineConfig& c) { c.data_source = "tsv"; });
    reject([](PipelineConfig& c) { c.synth.seq_len_min = 2; });
    reject([](PipelineConfig& c) { c.synth.seq_len_max = c.synth.seq_len_min - 1; });
    reject([](PipelineConfig& c) { c.backbone.d = 6; c.backbone.n_heads = 4; });
    reject([](PipelineConfig& c) { c.backbone.d = 0; });
    reject([](PipelineConfig& c) { c.proxy.d_model = 10; c.proxy.n_heads = 4; });
    reject([](PipelineConfig& c) { c.pregroup_k = 0; });
    reject([](PipelineConfig& c) { c.proxy.lora_rank = 0; });
    reject([](PipelineConfig& c) { c.proxy.holdout_fraction = 1.0; });
    reject([](PipelineConfig& c) { c.proxy.holdout_fraction = -0.1; });
    reject([](PipelineConfig& c) { c.eval_buckets = 0; });
    reject([](PipelineConfig& c) { c.eval_ks = {5, 0}; });
    reject([](PipelineConfig& c) { c.proxy.max_prompt_len = 19; });

    PipelineConfig tsv_ok;
    tsv_ok.data_source = "tsv";
    tsv_ok.data_path = "/tmp/whatever.tsv";
    CHECK_NOTHROW(validate_config(tsv_ok));
}

TEST_CASE("stage inputs are tied to the producing config unless overridden") {
    std::string dir = temp_dir("resume");
    PipelineConfig cfg = tiny_pipeline_cfg(dir);
    {
        PipelineContext ctx = make_context(cfg);
        run_stage(ctx, Stage::pretrain);
    }
    CHECK(fs::exists(dir + "/" + artifact_file::item_embeddings));

    PipelineConfig changed = cfg;
    changed.pregroup_k = 4;
    {
        PipelineContext ctx = make_context(changed);
        std::string msg = message_of([&] { run_stage(ctx, Stage::pregroup); });
        CHECK(msg.find("produced under config") != std::string::npos);
    }
    {
        // An explicit input path is taken at face value: the caller opted out
        // of the identity check for that one file.
        PipelineContext ctx = make_context(changed);
        ctx.input_overrides[artifact_file::item_embeddings] =
            dir + "/" + artifact_file::item_embeddings;
        CHECK_NOTHROW(run_stage(ctx, Stage::pregroup));
        CHECK(fs::exists(dir + "/" + artifact_file::group_model));
    }
}

TEST_CASE("running a stage before its inputs exist names the producing stage") {
    std::string dir = temp_dir("missing");
    PipelineContext ctx = make_context(tiny_pipeline_cfg(dir));
    std::string msg = message_of([&] { run_stage(ctx, Stage::sft); });
    CHECK(msg.find("missing artifact") != std::string::npos);
    CHECK(msg.find("pretrain") != std::string::npos);
}

TEST_CASE("cli: full run writes the report bundle and exits zero") {
    REQUIRE(cli_binary() != nullptr);
    std::string dir = temp_dir("cli_run");
    int rc = run_cli("run --out " + dir + kTinySets + " >/dev/null 2>&1");
    CHECK(rc == 0);
    for (const char* f : {"base_backbone.ckpt", "item_embeddings.bin", "group_model.bin",
                          "preference_targets.bin", "adapter.ckpt", "enhanced_items.bin",
                          "fused_backbone.ckpt", "eval_base.json", "eval_fused.json",
                          "report.json", "manifest.json", "metrics.csv", "agreement.csv"})
        CHECK_MESSAGE(fs::exists(dir + "/" + f), f);
}

TEST_CASE("cli: single-checkpoint eval writes a fragment named after the model") {
    REQUIRE(cli_binary() != nullptr);
    std::string dir = "/tmp/p2rec_cfg_cli_run_" + std::to_string(::getpid());
    REQUIRE(fs::exists(dir + "/base_backbone.ckpt"));  // produced by the run above
    int rc = run_cli("eval --out " + dir + kTinySets + " --model " + dir +
                     "/base_backbone.ckpt >/dev/null 2>&1");
    CHECK(rc == 0);
    CHECK(fs::exists(dir + "/eval_base_backbone.json"));
    json j = json::parse(std::ifstream(dir + "/eval_base_backbone.json"));
    CHECK(j.at("ranks").size() == 48);
}

TEST_CASE("cli: pregroup can cluster a foreign embedding file into a fresh directory") {
    REQUIRE(cli_binary() != nullptr);
    std::string src = "/tmp/p2rec_cfg_cli_run_" + std::to_string(::getpid());
    REQUIRE(fs::exists(src + "/item_embeddings.bin"));
    std::string dir = temp_dir("cli_pregroup");
    // --k changes the config identity; --embeddings bypasses the hash check
    // for that input, so the stage still runs.
    int rc = run_cli("pregroup --out " + dir + kTinySets + " --k 3 --embeddings " + src +
                     "/item_embeddings.bin >/dev/null 2>&1");
    CHECK(rc == 0);
    CHECK(fs::exists(dir + "/group_model.bin"));
    CHECK(fs::exists(dir + "/preference_targets.bin"));
}

TEST_CASE("cli: resuming from the report stage reuses existing artifacts") {
    REQUIRE(cli_binary() != nullptr);
    std::string dir = "/tmp/p2rec_cfg_cli_run_" + std::to_string(::getpid());
    int rc = run_cli("run --out " + dir + kTinySets +
                     " --from-stage report >/dev/null 2>&1");
    CHECK(rc == 0);
}

TEST_CASE("cli: eval comparison emits mean scores and a significance test") {
    REQUIRE(cli_binary() != nullptr);
    std::string dir = "/tmp/p2rec_cfg_cli_run_" + std::to_string(::getpid());
    std::string out = dir + "/cmp.json";
    int rc = run_cli("report --compare " + dir + "/eval_base.json " + dir +
                     "/eval_fused.json > " + out + " 2>/dev/null");
    CHECK(rc == 0);
    json j = json::parse(std::ifstream(out));
    CHECK(j.at("a").at("users").get<int>() == 48);
    CHECK(j.at("b").at("users").get<int>() == 48);
    double p = j.at("welch").at("p").get<double>();
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
    double ma = j.at("a").at("mean_ndcg10").get<double>();
    CHECK(ma >= 0.0);
    CHECK(ma <= 1.0);
}

TEST_CASE("cli: show-config prints the canonical form and its hash") {
    REQUIRE(cli_binary() != nullptr);
    std::string out = "/tmp/p2rec_cfg_showcfg_" + std::to_string(::getpid()) + ".txt";
    int rc = run_cli("show-config --set seed=7 > " + out + " 2>/dev/null");
    CHECK(rc == 0);
    std::stringstream ss;
    ss << std::ifstream(out).rdbuf();
    std::string text = ss.str();
    CHECK(text.find("seed=7\n") != std::string::npos);
    CHECK(text.find("pregroup.k=16\n") != std::string::npos);
    CHECK(text.find("# hash=") != std::string::npos);
}

TEST_CASE("cli: config mistakes exit 2, missing stage inputs exit 3") {
    REQUIRE(cli_binary() != nullptr);
    CHECK(run_cli("run --set nobody.home=1 >/dev/null 2>&1") == 2);
    CHECK(run_cli("run --set seedonly >/dev/null 2>&1") == 2);
    CHECK(run_cli("run --set data.seq_min=2 >/dev/null 2>&1") == 2);
    CHECK(run_cli("run --from-stage warp >/dev/null 2>&1") == 2);
    CHECK(run_cli("definitely-not-a-command >/dev/null 2>&1") == 2);
    std::string dir = temp_dir("cli_empty");
    CHECK(run_cli("eval --out " + dir + kTinySets + " >/dev/null 2>&1") == 3);
}
