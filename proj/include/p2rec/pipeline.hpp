#pragma once

#include <map>
#include <string>
#include <vector>

#include "p2rec/config.hpp"
#include "p2rec/dataset.hpp"

namespace p2rec {

// Pipeline stages in execution order. Each stage reads its prerequisites from
// the output directory and writes its products there, so a run can resume
// from any stage whose inputs already exist.
enum class Stage { pretrain, pregroup, sft, augment, train_fused, eval, report };

Stage parse_stage(const std::string& name);
const char* stage_name(Stage s);

struct StageTiming {
    std::string stage;
    double seconds = 0;
};

struct PipelineContext {
    PipelineConfig cfg;
    uint64_t cfg_hash = 0;
    std::string out_dir;
    InteractionDataset data;
    std::vector<int32_t> planted_labels;  // synthetic data only, for reports
    std::vector<StageTiming> timings;     // stages run by this process
    // Explicit input-file substitutions (artifact name -> path). A substituted
    // file skips the config-hash equality check: the caller chose it by hand.
    std::map<std::string, std::string> input_overrides;
};

// Validates the config, applies environment overrides, derives the dataset
// deterministically, and creates the output directory.
PipelineContext make_context(PipelineConfig cfg);

void run_pretrain(PipelineContext& ctx);
void run_pregroup(PipelineContext& ctx);
void run_sft(PipelineContext& ctx);
void run_augment(PipelineContext& ctx);
void run_train_fused(PipelineContext& ctx);
void run_eval(PipelineContext& ctx);
void run_report(PipelineContext& ctx);

// Runs one stage and refreshes the manifest.
void run_stage(PipelineContext& ctx, Stage s);

// Runs every stage from `from` onward and refreshes the manifest.
void run_pipeline(PipelineContext& ctx, Stage from = Stage::pretrain);

// Evaluates one named checkpoint (base or fused, per its metadata) and writes
// an eval fragment to out_file. Fused checkpoints need enhanced_items.bin.
void run_eval_single(PipelineContext& ctx, const std::string& model_path,
                     const std::string& out_file);

// Welch comparison of two evaluation files on per-user NDCG@10; returns a
// JSON summary string.
std::string compare_evals(const std::string& path_a, const std::string& path_b);

// Artifact file names inside the output directory.
namespace artifact_file {
inline constexpr const char* base_backbone = "base_backbone.ckpt";
inline constexpr const char* item_embeddings = "item_embeddings.bin";
inline constexpr const char* group_model = "group_model.bin";
inline constexpr const char* preference_targets = "preference_targets.bin";
inline constexpr const char* adapter = "adapter.ckpt";
inline constexpr const char* sft_log = "sft_log.jsonl";
inline constexpr const char* enhanced_items = "enhanced_items.bin";
inline constexpr const char* fused_backbone = "fused_backbone.ckpt";
inline constexpr const char* eval_base = "eval_base.json";
inline constexpr const char* eval_fused = "eval_fused.json";
inline constexpr const char* report = "report.json";
inline constexpr const char* manifest = "manifest.json";
}  // namespace artifact_file

}  // namespace p2rec
