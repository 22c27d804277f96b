#include "p2rec/pipeline.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "p2rec/artifact.hpp"
#include "p2rec/augment.hpp"
#include "p2rec/backbone.hpp"
#include "p2rec/metrics.hpp"
#include "p2rec/pregroup.hpp"
#include "p2rec/proxy_lm.hpp"

namespace p2rec {

namespace fs = std::filesystem;
using json = nlohmann::json;

Stage parse_stage(const std::string& name) {
    if (name == "pretrain") return Stage::pretrain;
    if (name == "pregroup") return Stage::pregroup;
    if (name == "sft") return Stage::sft;
    if (name == "augment") return Stage::augment;
    if (name == "train-fused") return Stage::train_fused;
    if (name == "eval") return Stage::eval;
    if (name == "report") return Stage::report;
    throw ConfigError("unknown stage: " + name);
}

const char* stage_name(Stage s) {
    switch (s) {
        case Stage::pretrain: return "pretrain";
        case Stage::pregroup: return "pregroup";
        case Stage::sft: return "sft";
        case Stage::augment: return "augment";
        case Stage::train_fused: return "train-fused";
        case Stage::eval: return "eval";
        case Stage::report: return "report";
    }
    return "?";
}

namespace {

std::string join_path(const PipelineContext& ctx, const char* name) {
    return (fs::path(ctx.out_dir) / name).string();
}

std::string hex64(uint64_t v) { return format("%016llx", static_cast<unsigned long long>(v)); }

Artifact load_required(const PipelineContext& ctx, const char* name, ArtifactKind kind,
                       const char* producer) {
    auto ov = ctx.input_overrides.find(name);
    bool overridden = ov != ctx.input_overrides.end();
    std::string path = overridden ? ov->second : join_path(ctx, name);
    if (!fs::exists(path))
        throw StageError(format("missing artifact %s (produced by stage '%s'); run that stage "
                                "first or rerun without --from-stage",
                                path.c_str(), producer));
    Artifact a = load_artifact(path, kind);
    if (!overridden && a.config_hash != ctx.cfg_hash)
        throw StageError(format("artifact %s was produced under config %s, current config is %s",
                                path.c_str(), hex64(a.config_hash).c_str(),
                                hex64(ctx.cfg_hash).c_str()));
    return a;
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw StageError("cannot write " + path);
    out << content;
    if (!out) throw StageError("write failed for " + path);
}

std::string read_text(const std::string& path, const char* producer) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw StageError(format("missing file %s (produced by stage '%s')", path.c_str(),
                                producer));
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

class StageTimer {
public:
    StageTimer(PipelineContext& ctx, const char* name)
        : ctx_(ctx), name_(name), t0_(std::chrono::steady_clock::now()) {}
    ~StageTimer() {
        auto dt = std::chrono::steady_clock::now() - t0_;
        ctx_.timings.push_back(
            {name_, std::chrono::duration_cast<std::chrono::duration<double>>(dt).count()});
    }

private:
    PipelineContext& ctx_;
    std::string name_;
    std::chrono::steady_clock::time_point t0_;
};

void update_manifest(PipelineContext& ctx) {
    std::string path = join_path(ctx, artifact_file::manifest);
    json m = json::object();
    if (fs::exists(path)) {
        try {
            m = json::parse(read_text(path, "any"));
        } catch (const std::exception&) {
            m = json::object();  // corrupt manifests are rebuilt, not fatal
        }
    }
    m["config_hash"] = hex64(ctx.cfg_hash);
    m["seed"] = ctx.cfg.seed;
    m["canonical_config"] = canonical_config(ctx.cfg);
    json timings = m.contains("timings") && m["timings"].is_object() ? m["timings"]
                                                                    : json::object();
    for (const auto& t : ctx.timings) timings[t.stage] = t.seconds;
    m["timings"] = timings;
    json arts = json::object();
    const char* names[] = {artifact_file::base_backbone,  artifact_file::item_embeddings,
                           artifact_file::group_model,    artifact_file::preference_targets,
                           artifact_file::adapter,        artifact_file::sft_log,
                           artifact_file::enhanced_items, artifact_file::fused_backbone,
                           artifact_file::eval_base,      artifact_file::eval_fused,
                           artifact_file::report};
    for (const char* n : names) {
        std::string p = join_path(ctx, n);
        if (fs::exists(p)) arts[n] = {{"fnv1a64", hex64(file_fnv1a64(p))}};
    }
    m["artifacts"] = arts;
    write_text(path, m.dump(2) + "\n");
}

json backbone_meta(const PipelineContext& ctx, const char* which, const TrainResult& tr) {
    return json{{"model", which},
                {"arch", ctx.cfg.backbone.arch == BackboneArch::self_attention
                             ? "self_attention"
                             : "recurrent"},
                {"num_items", ctx.data.num_items},
                {"num_users", ctx.data.num_users},
                {"best_epoch", tr.best_epoch},
                {"best_val_ndcg10", tr.best_val_ndcg},
                {"epochs_run", tr.epochs.size()},
                {"diverged", tr.diverged}};
}

void write_eval_json(const PipelineContext& ctx, const char* which, const EvalResult& er,
                     const std::string& path) {
    json hr = json::object(), ndcg = json::object();
    for (const auto& [k, v] : er.hr) hr[std::to_string(k)] = v;
    for (const auto& [k, v] : er.ndcg) ndcg[std::to_string(k)] = v;
    json j = {{"model", which},
              {"config_hash", hex64(ctx.cfg_hash)},
              {"seed", ctx.cfg.seed},
              {"mask_history", ctx.cfg.eval_mask_history},
              {"hr", hr},
              {"ndcg", ndcg},
              {"users", er.users},
              {"ranks", er.ranks},
              {"train_lens", er.train_lens}};
    write_text(path, j.dump(2) + "\n");
}

EvalResult read_eval_json(const PipelineContext& ctx, const char* file, const char* producer) {
    json j = json::parse(read_text(join_path(ctx, file), producer));
    EvalResult er;
    er.users = j.at("users").get<std::vector<int32_t>>();
    er.ranks = j.at("ranks").get<std::vector<int64_t>>();
    er.train_lens = j.at("train_lens").get<std::vector<int64_t>>();
    for (const auto& [k, v] : j.at("hr").items()) er.hr[std::stoi(k)] = v.get<double>();
    for (const auto& [k, v] : j.at("ndcg").items()) er.ndcg[std::stoi(k)] = v.get<double>();
    return er;
}

GroupModel group_model_from_artifact(const Artifact& a) {
    GroupModel gm;
    gm.centroids = a.f32_tensor("centroids");
    gm.assignment = a.i32_vector("assignment");
    gm.k = static_cast<int32_t>(gm.centroids.rows());
    json meta = json::parse(a.bytes_string("meta"));
    gm.sse = meta.value("sse", 0.0);
    return gm;
}

}  // namespace

PipelineContext make_context(PipelineConfig cfg) {
    apply_env_overrides(cfg);
    validate_config(cfg);
    PipelineContext ctx;
    ctx.cfg = std::move(cfg);
    ctx.cfg_hash = config_hash(ctx.cfg);
    ctx.out_dir = ctx.cfg.out_dir;
    fs::create_directories(ctx.out_dir);
    if (ctx.cfg.data_source == "synthetic") {
        SyntheticSpec spec = ctx.cfg.synth;
        spec.seed = Rng::derive_seed(ctx.cfg.seed, "synthetic-data");
        SyntheticData sd = generate_synthetic(spec);
        ctx.data = std::move(sd.data);
        ctx.planted_labels = std::move(sd.planted_labels);
    } else {
        ctx.data = load_interactions(ctx.cfg.data_path);
    }
    ctx.data.validate();
    return ctx;
}

void run_pretrain(PipelineContext& ctx) {
    StageTimer timer(ctx, "pretrain");
    auto model = make_backbone<float>(ctx.cfg.backbone, ctx.data.num_items,
                                      Rng::derive_seed(ctx.cfg.seed, "backbone-base"));
    TrainResult tr = train_backbone(model, ctx.data,
                                    Rng::derive_seed(ctx.cfg.seed, "backbone-base-train"),
                                    ctx.cfg.eval_mask_history);
    Artifact ck = params_to_artifact(model.params, ctx.cfg_hash);
    ck.add_bytes("meta", backbone_meta(ctx, "base", tr).dump());
    save_artifact(ck, join_path(ctx, artifact_file::base_backbone));

    Artifact emb;
    emb.kind = ArtifactKind::embedding_table;
    emb.config_hash = ctx.cfg_hash;
    emb.add_f32("items", model.params.get("item_emb").value);
    emb.add_bytes("meta", json{{"num_items", ctx.data.num_items},
                               {"d", ctx.cfg.backbone.d}}
                              .dump());
    save_artifact(emb, join_path(ctx, artifact_file::item_embeddings));
}

void run_pregroup(PipelineContext& ctx) {
    StageTimer timer(ctx, "pregroup");
    Artifact emb = load_required(ctx, artifact_file::item_embeddings,
                                 ArtifactKind::embedding_table, "pretrain");
    Tensor<float> items = emb.f32_tensor("items");
    KMeansOptions opts;
    opts.max_iters = ctx.cfg.pregroup_max_iters;
    opts.restarts = ctx.cfg.pregroup_restarts;
    GroupModel gm = fit_kmeans(items, ctx.cfg.pregroup_k,
                               Rng::derive_seed(ctx.cfg.seed, "pregroup"), opts);
    Artifact ga;
    ga.kind = ArtifactKind::group_model;
    ga.config_hash = ctx.cfg_hash;
    ga.add_f32("centroids", gm.centroids);
    ga.add_i32("assignment", gm.assignment);
    ga.add_bytes("meta", json{{"k", gm.k}, {"sse", gm.sse}}.dump());
    save_artifact(ga, join_path(ctx, artifact_file::group_model));

    PreferenceTargets pt = build_targets(ctx.data, gm, ctx.cfg.pregroup_count_distinct);
    Artifact pa;
    pa.kind = ArtifactKind::preference_targets;
    pa.config_hash = ctx.cfg_hash;
    pa.add_f32("targets", pt.targets);
    pa.add_bytes("meta",
                 json{{"k", pt.k}, {"excluded_users", pt.excluded_users}}.dump());
    save_artifact(pa, join_path(ctx, artifact_file::preference_targets));
}

void run_sft(PipelineContext& ctx) {
    StageTimer timer(ctx, "sft");
    Artifact emb = load_required(ctx, artifact_file::item_embeddings,
                                 ArtifactKind::embedding_table, "pretrain");
    Artifact pa = load_required(ctx, artifact_file::preference_targets,
                                ArtifactKind::preference_targets, "pregroup");
    PreferenceTargets pt;
    pt.targets = pa.f32_tensor("targets");
    json pmeta = json::parse(pa.bytes_string("meta"));
    pt.k = pmeta.at("k").get<int32_t>();
    pt.excluded_users = pmeta.value("excluded_users", 0);

    auto proxy = make_proxy<float>(ctx.cfg.proxy, pt.k, emb.f32_tensor("items"),
                                   Rng::derive_seed(ctx.cfg.seed, "proxy-init"));
    std::vector<double> pretrain_losses;
    if (ctx.cfg.proxy_random_base)
        freeze_random_base(proxy);
    else
        pretrain_losses = pretrain_proxy_base(proxy, ctx.data,
                                              Rng::derive_seed(ctx.cfg.seed, "proxy-pretrain"));
    int64_t forwards_before_sft = proxy.forward_count;
    SftResult sr = sft_train(proxy, ctx.data, pt, Rng::derive_seed(ctx.cfg.seed, "sft"));
    if (sr.best_epoch < 0)
        throw StageError("sft produced no finite epoch; adapter not saved");

    Artifact ck = params_to_artifact(proxy.params, ctx.cfg_hash);
    ck.add_bytes("meta", json{{"model", "proxy"},
                              {"k", pt.k},
                              {"d_model", ctx.cfg.proxy.d_model},
                              {"vocab_size", proxy.vocab.size()},
                              {"best_epoch", sr.best_epoch},
                              {"diverged", sr.diverged},
                              {"train_users", sr.train_users.size()},
                              {"holdout_users", sr.holdout_users.size()},
                              {"pretrain_losses", pretrain_losses},
                              {"sft_forwards", proxy.forward_count - forwards_before_sft}}
                             .dump());
    save_artifact(ck, join_path(ctx, artifact_file::adapter));

    std::string log;
    for (const auto& e : sr.epochs) {
        json line = {{"epoch", e.epoch},
                     {"train_loss", e.train_loss},
                     {"holdout_loss", e.holdout_loss},
                     {"holdout_tv", e.holdout_tv},
                     {"train_forwards", e.train_forwards}};
        log += line.dump() + "\n";
    }
    write_text(join_path(ctx, artifact_file::sft_log), log);
}

void run_augment(PipelineContext& ctx) {
    StageTimer timer(ctx, "augment");
    Artifact emb = load_required(ctx, artifact_file::item_embeddings,
                                 ArtifactKind::embedding_table, "pretrain");
    Artifact ck = load_required(ctx, artifact_file::adapter, ArtifactKind::checkpoint, "sft");
    json meta = json::parse(ck.bytes_string("meta"));
    auto proxy = make_proxy<float>(ctx.cfg.proxy, meta.at("k").get<int32_t>(),
                                   emb.f32_tensor("items"),
                                   Rng::derive_seed(ctx.cfg.seed, "proxy-init"));
    load_params_from_artifact(ck, proxy.params);
    proxy.lora_enabled = true;
    int64_t before = proxy.forward_count;
    EnhancedItemSet es = embed_all_items(proxy);

    Artifact ea;
    ea.kind = ArtifactKind::enhanced_items;
    ea.config_hash = ctx.cfg_hash;
    ea.add_f32("knowledge", es.knowledge);
    ea.add_f32("distributions", es.distributions);
    ea.add_bytes("meta", json{{"num_items", es.num_items()},
                              {"k", es.distributions.cols()},
                              {"d_model", es.knowledge.cols()},
                              {"prompt_forwards", proxy.forward_count - before}}
                             .dump());
    save_artifact(ea, join_path(ctx, artifact_file::enhanced_items));
}

void run_train_fused(PipelineContext& ctx) {
    StageTimer timer(ctx, "train-fused");
    Artifact ea = load_required(ctx, artifact_file::enhanced_items,
                                ArtifactKind::enhanced_items, "augment");
    auto fused = make_fused_backbone<float>(ctx.cfg.backbone, ctx.data.num_items,
                                            ea.f32_tensor("knowledge"), ctx.cfg.fusion,
                                            Rng::derive_seed(ctx.cfg.seed, "backbone-fused"));
    TrainResult tr = train_backbone(fused, ctx.data,
                                    Rng::derive_seed(ctx.cfg.seed, "backbone-fused-train"),
                                    ctx.cfg.eval_mask_history);
    Artifact ck = params_to_artifact(fused.params, ctx.cfg_hash);
    json meta = backbone_meta(ctx, "fused", tr);
    meta["fusion_mode"] = ctx.cfg.fusion.mode == FusionMode::gate_concat ? "gate_concat"
                          : ctx.cfg.fusion.mode == FusionMode::gate_scalar ? "gate_scalar"
                                                                           : "sum";
    ck.add_bytes("meta", meta.dump());
    save_artifact(ck, join_path(ctx, artifact_file::fused_backbone));
}

void run_eval(PipelineContext& ctx) {
    StageTimer timer(ctx, "eval");
    {
        Artifact ck = load_required(ctx, artifact_file::base_backbone, ArtifactKind::checkpoint,
                                    "pretrain");
        auto model = make_backbone<float>(ctx.cfg.backbone, ctx.data.num_items,
                                          Rng::derive_seed(ctx.cfg.seed, "backbone-base"));
        load_params_from_artifact(ck, model.params);
        EvalResult er = evaluate(make_scorer(model), ctx.data, ctx.cfg.eval_ks,
                                 ctx.cfg.eval_mask_history);
        write_eval_json(ctx, "base", er, join_path(ctx, artifact_file::eval_base));
    }
    {
        Artifact ea = load_required(ctx, artifact_file::enhanced_items,
                                    ArtifactKind::enhanced_items, "augment");
        Artifact ck = load_required(ctx, artifact_file::fused_backbone, ArtifactKind::checkpoint,
                                    "train-fused");
        auto fused = make_fused_backbone<float>(ctx.cfg.backbone, ctx.data.num_items,
                                                ea.f32_tensor("knowledge"), ctx.cfg.fusion,
                                                Rng::derive_seed(ctx.cfg.seed, "backbone-fused"));
        load_params_from_artifact(ck, fused.params);
        EvalResult er = evaluate(make_scorer(fused), ctx.data, ctx.cfg.eval_ks,
                                 ctx.cfg.eval_mask_history);
        write_eval_json(ctx, "fused", er, join_path(ctx, artifact_file::eval_fused));
    }
}

void run_eval_single(PipelineContext& ctx, const std::string& model_path,
                     const std::string& out_file) {
    if (!fs::exists(model_path)) throw StageError("missing model checkpoint " + model_path);
    Artifact ck = load_artifact(model_path, ArtifactKind::checkpoint);
    json meta = json::parse(ck.bytes_string("meta"));
    std::string which = meta.value("model", "");
    EvalResult er;
    if (which == "base") {
        auto model = make_backbone<float>(ctx.cfg.backbone, ctx.data.num_items,
                                          Rng::derive_seed(ctx.cfg.seed, "backbone-base"));
        load_params_from_artifact(ck, model.params);
        er = evaluate(make_scorer(model), ctx.data, ctx.cfg.eval_ks, ctx.cfg.eval_mask_history);
    } else if (which == "fused") {
        Artifact ea = load_required(ctx, artifact_file::enhanced_items,
                                    ArtifactKind::enhanced_items, "augment");
        auto fused = make_fused_backbone<float>(ctx.cfg.backbone, ctx.data.num_items,
                                                ea.f32_tensor("knowledge"), ctx.cfg.fusion,
                                                Rng::derive_seed(ctx.cfg.seed, "backbone-fused"));
        load_params_from_artifact(ck, fused.params);
        er = evaluate(make_scorer(fused), ctx.data, ctx.cfg.eval_ks, ctx.cfg.eval_mask_history);
    } else {
        throw StageError(format("%s is not a backbone checkpoint (model tag '%s')",
                                model_path.c_str(), which.c_str()));
    }
    write_eval_json(ctx, which.c_str(), er, out_file);
}

void run_report(PipelineContext& ctx) {
    StageTimer timer(ctx, "report");
    EvalResult base = read_eval_json(ctx, artifact_file::eval_base, "eval");
    EvalResult fused = read_eval_json(ctx, artifact_file::eval_fused, "eval");
    Artifact ga = load_required(ctx, artifact_file::group_model, ArtifactKind::group_model,
                                "pregroup");
    Artifact ea = load_required(ctx, artifact_file::enhanced_items,
                                ArtifactKind::enhanced_items, "augment");
    GroupModel gm = group_model_from_artifact(ga);
    CategoryAgreement agree = category_agreement(ea.f32_tensor("distributions"), gm);

    // metrics.csv
    std::string mcsv = "model,metric,k,value\n";
    auto metric_rows = [&](const char* name, const EvalResult& er) {
        for (int k : ctx.cfg.eval_ks) {
            mcsv += format("%s,hr,%d,%.10g\n", name, k, er.hr.at(k));
            mcsv += format("%s,ndcg,%d,%.10g\n", name, k, er.ndcg.at(k));
        }
    };
    metric_rows("base", base);
    metric_rows("fused", fused);
    write_text(join_path(ctx, "metrics.csv"), mcsv);

    // ratio.csv: fused-over-base improvement per metric; nan when base is 0
    std::string rcsv = "metric,k,base,fused,ratio\n";
    json ratios = json::object();
    for (const char* metric : {"hr", "ndcg"}) {
        json per_k = json::object();
        for (int k : ctx.cfg.eval_ks) {
            double b = metric == std::string("hr") ? base.hr.at(k) : base.ndcg.at(k);
            double f = metric == std::string("hr") ? fused.hr.at(k) : fused.ndcg.at(k);
            double ratio = b != 0.0 ? f / b : std::numeric_limits<double>::quiet_NaN();
            rcsv += format("%s,%d,%.10g,%.10g,%.10g\n", metric, k, b, f, ratio);
            per_k[std::to_string(k)] = {{"base", b}, {"fused", f}, {"ratio", ratio}};
        }
        ratios[metric] = per_k;
    }
    write_text(join_path(ctx, "ratio.csv"), rcsv);

    // activity.csv: equal-count user buckets by train-sequence length
    std::string acsv = "model,bucket,min_len,max_len,size,metric,k,value\n";
    json activity = json::object();
    auto bucket_rows = [&](const char* name, const EvalResult& er) {
        auto buckets = grouped_evaluate(er, ctx.cfg.eval_buckets, ctx.cfg.eval_ks);
        json arr = json::array();
        for (size_t b = 0; b < buckets.size(); ++b) {
            const ActivityBucket& bk = buckets[b];
            json jb = {{"bucket", b}, {"size", bk.size}};
            if (bk.size == 0) {
                jb["min_len"] = nullptr;
                jb["max_len"] = nullptr;
                jb["hr"] = nullptr;
                jb["ndcg"] = nullptr;
                for (int k : ctx.cfg.eval_ks) {
                    acsv += format("%s,%zu,,,0,hr,%d,\n", name, b, k);
                    acsv += format("%s,%zu,,,0,ndcg,%d,\n", name, b, k);
                }
            } else {
                jb["min_len"] = bk.min_len;
                jb["max_len"] = bk.max_len;
                json hr = json::object(), ndcg = json::object();
                for (int k : ctx.cfg.eval_ks) {
                    hr[std::to_string(k)] = bk.hr.at(k);
                    ndcg[std::to_string(k)] = bk.ndcg.at(k);
                    acsv += format("%s,%zu,%lld,%lld,%zu,hr,%d,%.10g\n", name, b,
                                   static_cast<long long>(bk.min_len),
                                   static_cast<long long>(bk.max_len), bk.size, k, bk.hr.at(k));
                    acsv += format("%s,%zu,%lld,%lld,%zu,ndcg,%d,%.10g\n", name, b,
                                   static_cast<long long>(bk.min_len),
                                   static_cast<long long>(bk.max_len), bk.size, k,
                                   bk.ndcg.at(k));
                }
                jb["hr"] = hr;
                jb["ndcg"] = ndcg;
            }
            arr.push_back(jb);
        }
        activity[name] = arr;
    };
    bucket_rows("base", base);
    bucket_rows("fused", fused);
    write_text(join_path(ctx, "activity.csv"), acsv);

    // agreement.csv: share of items whose inferred top category matches the
    // pre-grouping (C1), lands in the top-3 (C2), or neither (C3)
    std::string gcsv = "category,share\n";
    gcsv += format("C1,%.10g\nC2,%.10g\nC3,%.10g\n", agree.c1, agree.c2, agree.c3);
    write_text(join_path(ctx, "agreement.csv"), gcsv);

    // sft efficiency: measured user-level prompts per epoch vs the
    // instance-level comparator (one prompt per ingested interaction)
    json sft_eff;
    {
        std::string log = read_text(join_path(ctx, artifact_file::sft_log), "sft");
        std::stringstream ss(log);
        std::string line;
        int64_t first_epoch_forwards = 0;
        int epochs = 0;
        while (std::getline(ss, line)) {
            if (line.empty()) continue;
            json e = json::parse(line);
            if (epochs == 0) first_epoch_forwards = e.at("train_forwards").get<int64_t>();
            ++epochs;
        }
        int64_t instance_est = ctx.data.total_interactions();
        sft_eff = {{"user_prompts_per_epoch", first_epoch_forwards},
                   {"instance_prompts_per_epoch_estimate", instance_est},
                   {"epochs", epochs},
                   {"prompt_ratio", first_epoch_forwards > 0
                                        ? static_cast<double>(instance_est) /
                                              static_cast<double>(first_epoch_forwards)
                                        : std::numeric_limits<double>::quiet_NaN()}};
    }

    // Welch on per-user NDCG@10 between base and fused (informational within
    // a single run; the multi-seed comparison uses one eval file per seed)
    json welch = nullptr;
    {
        int k = 10;
        if (base.ndcg.find(k) == base.ndcg.end() && !ctx.cfg.eval_ks.empty())
            k = ctx.cfg.eval_ks.front();
        std::vector<double> a, b;
        for (int64_t r : base.ranks) a.push_back(ndcg_at_k(r, k));
        for (int64_t r : fused.ranks) b.push_back(ndcg_at_k(r, k));
        if (a.size() >= 2 && b.size() >= 2) {
            WelchResult w = welch_ttest(b, a);
            welch = {{"k", k}, {"t", w.t}, {"df", w.df}, {"p", w.p}};
        }
    }

    // timing.csv from the manifest (persisted across resumed runs) plus the
    // stages timed in this process
    json manifest = json::object();
    std::string mpath = join_path(ctx, artifact_file::manifest);
    if (fs::exists(mpath)) {
        try {
            manifest = json::parse(read_text(mpath, "any"));
        } catch (const std::exception&) {
        }
    }
    json timings = manifest.contains("timings") && manifest["timings"].is_object()
                       ? manifest["timings"]
                       : json::object();
    for (const auto& t : ctx.timings) timings[t.stage] = t.seconds;
    std::string tcsv = "stage,seconds\n";
    for (const auto& [k, v] : timings.items())
        tcsv += format("%s,%.6f\n", k.c_str(), v.get<double>());
    write_text(join_path(ctx, "timing.csv"), tcsv);

    json hr_b = json::object(), nd_b = json::object(), hr_f = json::object(),
         nd_f = json::object();
    for (const auto& [k, v] : base.hr) hr_b[std::to_string(k)] = v;
    for (const auto& [k, v] : base.ndcg) nd_b[std::to_string(k)] = v;
    for (const auto& [k, v] : fused.hr) hr_f[std::to_string(k)] = v;
    for (const auto& [k, v] : fused.ndcg) nd_f[std::to_string(k)] = v;
    json report = {
        {"config_hash", hex64(ctx.cfg_hash)},
        {"seed", ctx.cfg.seed},
        {"dataset",
         {{"users", ctx.data.num_users},
          {"items", ctx.data.num_items},
          {"interactions", ctx.data.total_interactions()},
          {"dropped_users", ctx.data.dropped_users}}},
        {"metrics",
         {{"base", {{"hr", hr_b}, {"ndcg", nd_b}}},
          {"fused", {{"hr", hr_f}, {"ndcg", nd_f}}}}},
        {"ratios", ratios},
        {"activity", activity},
        {"category_agreement", {{"c1", agree.c1}, {"c2", agree.c2}, {"c3", agree.c3}}},
        {"sft_efficiency", sft_eff},
        {"welch_ndcg", welch},
        {"timings", timings}};
    write_text(join_path(ctx, artifact_file::report), report.dump(2) + "\n");
}

void run_stage(PipelineContext& ctx, Stage s) {
    switch (s) {
        case Stage::pretrain: run_pretrain(ctx); break;
        case Stage::pregroup: run_pregroup(ctx); break;
        case Stage::sft: run_sft(ctx); break;
        case Stage::augment: run_augment(ctx); break;
        case Stage::train_fused: run_train_fused(ctx); break;
        case Stage::eval: run_eval(ctx); break;
        case Stage::report: run_report(ctx); break;
    }
    update_manifest(ctx);
}

void run_pipeline(PipelineContext& ctx, Stage from) {
    const Stage order[] = {Stage::pretrain, Stage::pregroup,    Stage::sft,  Stage::augment,
                           Stage::train_fused, Stage::eval, Stage::report};
    bool started = false;
    for (Stage s : order) {
        if (s == from) started = true;
        if (started) run_stage(ctx, s);
    }
    if (!started) throw ConfigError("run_pipeline: stage not in pipeline order");
}

std::string compare_evals(const std::string& path_a, const std::string& path_b) {
    auto load_ranks = [](const std::string& p) {
        json j = json::parse(read_text(p, "eval"));
        return j.at("ranks").get<std::vector<int64_t>>();
    };
    std::vector<int64_t> ra = load_ranks(path_a), rb = load_ranks(path_b);
    std::vector<double> a, b;
    for (int64_t r : ra) a.push_back(ndcg_at_k(r, 10));
    for (int64_t r : rb) b.push_back(ndcg_at_k(r, 10));
    double ma = 0, mb = 0;
    for (double v : a) ma += v;
    for (double v : b) mb += v;
    ma /= a.empty() ? 1 : static_cast<double>(a.size());
    mb /= b.empty() ? 1 : static_cast<double>(b.size());
    WelchResult w = welch_ttest(a, b);
    json out = {{"a", {{"path", path_a}, {"mean_ndcg10", ma}, {"users", a.size()}}},
                {"b", {{"path", path_b}, {"mean_ndcg10", mb}, {"users", b.size()}}},
                {"welch", {{"t", w.t}, {"df", w.df}, {"p", w.p}}}};
    return out.dump(2);
}

}  // namespace p2rec
