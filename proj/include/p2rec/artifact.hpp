#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "p2rec/common.hpp"
#include "p2rec/params.hpp"
#include "p2rec/tensor.hpp"

namespace p2rec {

// On-disk container shared by every pipeline stage: magic "P2RC", u16
// version, u8 kind tag, u64 config hash, then named sections with a dtype and
// dimension header and a little-endian row-major payload. Round-trips are
// bit-exact.
enum class ArtifactKind : uint8_t {
    embedding_table = 1,
    group_model = 2,
    preference_targets = 3,
    checkpoint = 4,
    enhanced_items = 5,
    metrics_report = 6,
};

const char* artifact_kind_name(ArtifactKind kind);

enum class SectionDtype : uint8_t { f32 = 0, f64 = 1, i32 = 2, bytes = 3, u64 = 4 };

struct ArtifactSection {
    std::string name;
    SectionDtype dtype = SectionDtype::bytes;
    std::vector<uint64_t> dims;
    std::vector<uint8_t> payload;

    size_t elem_count() const {
        size_t n = 1;
        for (uint64_t d : dims) n *= static_cast<size_t>(d);
        return n;
    }
};

struct Artifact {
    ArtifactKind kind = ArtifactKind::checkpoint;
    uint64_t config_hash = 0;
    std::vector<ArtifactSection> sections;

    ArtifactSection& add_f32(const std::string& name, const float* data,
                             std::vector<uint64_t> dims);
    ArtifactSection& add_f32(const std::string& name, const Tensor<float>& t);
    ArtifactSection& add_i32(const std::string& name, const std::vector<int32_t>& v);
    ArtifactSection& add_u64(const std::string& name, const std::vector<uint64_t>& v);
    ArtifactSection& add_bytes(const std::string& name, const std::string& s);

    const ArtifactSection& section(const std::string& name) const;
    const ArtifactSection* find(const std::string& name) const;

    Tensor<float> f32_tensor(const std::string& name) const;
    std::vector<int32_t> i32_vector(const std::string& name) const;
    std::vector<uint64_t> u64_vector(const std::string& name) const;
    std::string bytes_string(const std::string& name) const;
};

void save_artifact(const Artifact& a, const std::string& path);

// Refuses files with a bad magic, unknown version, truncation, or (when
// expected_kind is given) the wrong kind tag.
Artifact load_artifact(const std::string& path);
Artifact load_artifact(const std::string& path, ArtifactKind expected_kind);

// Checkpoint helpers: one "p:<name>" section per parameter value.
Artifact params_to_artifact(const ParamSet<float>& params, uint64_t config_hash);
void load_params_from_artifact(const Artifact& a, ParamSet<float>& params);

uint64_t file_fnv1a64(const std::string& path);

}  // namespace p2rec
