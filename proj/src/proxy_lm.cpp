#include "p2rec/proxy_lm.hpp"

#include <cmath>
#include <unordered_map>

#include "p2rec/common.hpp"

namespace p2rec {

Vocabulary build_vocabulary(int32_t num_groups) {
    if (num_groups <= 0) throw ConfigError("build_vocabulary: need a positive group count");
    Vocabulary v;
    v.tokens = {"<pad>", "<bos>", "<eos>", "<unk>"};
    v.pad = 0;
    v.bos = 1;
    v.eos = 2;
    v.unk = 3;
    const std::vector<std::string> words = {
        "given", "the",          "user",
        "interaction", "history", "infer",
        "a",     "preference",   "distribution",
        "over",  std::to_string(num_groups), "item",
        "categories"};
    std::unordered_map<std::string, int32_t> seen;
    for (size_t i = 0; i < v.tokens.size(); ++i) seen[v.tokens[i]] = static_cast<int32_t>(i);
    for (const auto& w : words) {
        auto it = seen.find(w);
        int32_t id;
        if (it == seen.end()) {
            id = static_cast<int32_t>(v.tokens.size());
            v.tokens.push_back(w);
            seen[w] = id;
        } else {
            id = it->second;
        }
        v.instruction.push_back(id);
    }
    v.response = static_cast<int32_t>(v.tokens.size());
    v.tokens.push_back("Response:");
    return v;
}

namespace {

// Shared scaffolding: pad-token row 0 is pre-seeded so pad cells can all
// reference it; positions are filled for every padded cell up front.
void init_batch(PromptBatch& pb, const Vocabulary& vocab, size_t batch, size_t seq_len) {
    pb.batch = batch;
    pb.seq_len = seq_len;
    pb.tok_ids = {vocab.pad};
    pb.sel.assign(batch * seq_len, {0, 0});
    pb.pos_ids.resize(batch * seq_len);
    for (size_t r = 0; r < batch; ++r)
        for (size_t t = 0; t < seq_len; ++t)
            pb.pos_ids[r * seq_len + t] = static_cast<int32_t>(t);
}

}  // namespace

PromptBatch make_preference_prompts(const Vocabulary& vocab,
                                    const std::vector<std::vector<int32_t>>& item_seqs,
                                    size_t max_prompt_len) {
    const size_t fixed = 3 + vocab.instruction.size();  // bos + words + response + eos
    if (max_prompt_len < fixed + 1)
        throw ConfigError(format("make_preference_prompts: max_prompt_len %zu leaves no room "
                                 "for item slots (need >= %zu)",
                                 max_prompt_len, fixed + 1));
    const size_t budget = max_prompt_len - fixed;
    std::vector<size_t> n_slots(item_seqs.size()), off(item_seqs.size());
    size_t seq_len = 0;
    for (size_t r = 0; r < item_seqs.size(); ++r) {
        if (item_seqs[r].empty())
            throw ConfigError("make_preference_prompts: empty item sequence");
        n_slots[r] = std::min(item_seqs[r].size(), budget);
        off[r] = item_seqs[r].size() - n_slots[r];
        seq_len = std::max(seq_len, fixed + n_slots[r]);
    }
    PromptBatch pb;
    init_batch(pb, vocab, item_seqs.size(), seq_len);
    pb.resp_rows.resize(item_seqs.size());
    for (size_t r = 0; r < item_seqs.size(); ++r) {
        size_t row = r * seq_len, t = 0;
        auto put_tok = [&](int32_t id) {
            pb.tok_ids.push_back(id);
            pb.sel[row + t] = {0, pb.tok_ids.size() - 1};
            ++t;
        };
        put_tok(vocab.bos);
        for (int32_t w : vocab.instruction) put_tok(w);
        for (size_t i = 0; i < n_slots[r]; ++i) {
            pb.slot_item_ids.push_back(item_seqs[r][off[r] + i]);
            pb.sel[row + t] = {1, pb.slot_item_ids.size() - 1};
            ++t;
        }
        put_tok(vocab.response);
        put_tok(vocab.eos);
        pb.resp_rows[r] = row + t - 1;  // the eos position summarizes the prompt
    }
    return pb;
}

PromptBatch make_pretrain_prompts(const Vocabulary& vocab,
                                  const std::vector<std::vector<int32_t>>& item_seqs,
                                  size_t max_prompt_len, std::vector<size_t>* pred_rows,
                                  std::vector<int32_t>* targets) {
    if (max_prompt_len < 2)
        throw ConfigError("make_pretrain_prompts: max_prompt_len must be at least 2");
    const size_t budget = max_prompt_len - 1;  // bos takes one position
    std::vector<size_t> n_slots(item_seqs.size()), off(item_seqs.size());
    size_t seq_len = 0;
    for (size_t r = 0; r < item_seqs.size(); ++r) {
        if (item_seqs[r].empty())
            throw ConfigError("make_pretrain_prompts: empty item sequence");
        n_slots[r] = std::min(item_seqs[r].size(), budget);
        off[r] = item_seqs[r].size() - n_slots[r];
        seq_len = std::max(seq_len, 1 + n_slots[r]);
    }
    PromptBatch pb;
    init_batch(pb, vocab, item_seqs.size(), seq_len);
    pred_rows->clear();
    targets->clear();
    for (size_t r = 0; r < item_seqs.size(); ++r) {
        size_t row = r * seq_len;
        pb.tok_ids.push_back(vocab.bos);
        pb.sel[row] = {0, pb.tok_ids.size() - 1};
        for (size_t i = 0; i < n_slots[r]; ++i) {
            pb.slot_item_ids.push_back(item_seqs[r][off[r] + i]);
            pb.sel[row + 1 + i] = {1, pb.slot_item_ids.size() - 1};
        }
        // position t predicts the item entering at t+1
        for (size_t t = 0; t < n_slots[r]; ++t) {
            pred_rows->push_back(row + t);
            targets->push_back(item_seqs[r][off[r] + t]);
        }
    }
    return pb;
}

double mean_tv_distance(const Tensor<float>& a, const Tensor<float>& b) {
    if (a.shape != b.shape) throw ShapeError("mean_tv_distance: shape mismatch");
    if (a.rows() == 0) return 0.0;
    double acc = 0;
    size_t c = a.cols();
    for (size_t r = 0; r < a.rows(); ++r) {
        double s = 0;
        for (size_t j = 0; j < c; ++j)
            s += std::fabs(static_cast<double>(a.v[r * c + j]) -
                           static_cast<double>(b.v[r * c + j]));
        acc += 0.5 * s;
    }
    return acc / static_cast<double>(a.rows());
}

}  // namespace p2rec
