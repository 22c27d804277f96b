#include "p2rec/artifact.hpp"

#include <bit>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "artifact format is little-endian; big-endian hosts are unsupported");

namespace p2rec {

namespace {

constexpr char kMagic[4] = {'P', '2', 'R', 'C'};
constexpr uint16_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::istream& in, T& v, const std::string& path) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw ParseError("artifact " + path + ": truncated file");
}

size_t dtype_size(SectionDtype d) {
    switch (d) {
        case SectionDtype::f32: return 4;
        case SectionDtype::f64: return 8;
        case SectionDtype::i32: return 4;
        case SectionDtype::bytes: return 1;
        case SectionDtype::u64: return 8;
    }
    return 1;
}

}  // namespace

const char* artifact_kind_name(ArtifactKind kind) {
    switch (kind) {
        case ArtifactKind::embedding_table: return "embedding_table";
        case ArtifactKind::group_model: return "group_model";
        case ArtifactKind::preference_targets: return "preference_targets";
        case ArtifactKind::checkpoint: return "checkpoint";
        case ArtifactKind::enhanced_items: return "enhanced_items";
        case ArtifactKind::metrics_report: return "metrics_report";
    }
    return "unknown";
}

ArtifactSection& Artifact::add_f32(const std::string& name, const float* data,
                                   std::vector<uint64_t> dims) {
    ArtifactSection s;
    s.name = name;
    s.dtype = SectionDtype::f32;
    s.dims = std::move(dims);
    s.payload.resize(s.elem_count() * 4);
    std::memcpy(s.payload.data(), data, s.payload.size());
    sections.push_back(std::move(s));
    return sections.back();
}

ArtifactSection& Artifact::add_f32(const std::string& name, const Tensor<float>& t) {
    std::vector<uint64_t> dims(t.shape.begin(), t.shape.end());
    return add_f32(name, t.data(), std::move(dims));
}

ArtifactSection& Artifact::add_i32(const std::string& name, const std::vector<int32_t>& v) {
    ArtifactSection s;
    s.name = name;
    s.dtype = SectionDtype::i32;
    s.dims = {v.size()};
    s.payload.resize(v.size() * 4);
    std::memcpy(s.payload.data(), v.data(), s.payload.size());
    sections.push_back(std::move(s));
    return sections.back();
}

ArtifactSection& Artifact::add_u64(const std::string& name, const std::vector<uint64_t>& v) {
    ArtifactSection s;
    s.name = name;
    s.dtype = SectionDtype::u64;
    s.dims = {v.size()};
    s.payload.resize(v.size() * 8);
    std::memcpy(s.payload.data(), v.data(), s.payload.size());
    sections.push_back(std::move(s));
    return sections.back();
}

ArtifactSection& Artifact::add_bytes(const std::string& name, const std::string& str) {
    ArtifactSection s;
    s.name = name;
    s.dtype = SectionDtype::bytes;
    s.dims = {str.size()};
    s.payload.assign(str.begin(), str.end());
    sections.push_back(std::move(s));
    return sections.back();
}

const ArtifactSection* Artifact::find(const std::string& name) const {
    for (const auto& s : sections)
        if (s.name == name) return &s;
    return nullptr;
}

const ArtifactSection& Artifact::section(const std::string& name) const {
    const ArtifactSection* s = find(name);
    if (!s) throw ParseError("artifact: missing section '" + name + "'");
    return *s;
}

Tensor<float> Artifact::f32_tensor(const std::string& name) const {
    const ArtifactSection& s = section(name);
    if (s.dtype != SectionDtype::f32)
        throw ParseError("artifact: section '" + name + "' is not f32");
    Tensor<float> t(std::vector<size_t>(s.dims.begin(), s.dims.end()));
    std::memcpy(t.data(), s.payload.data(), s.payload.size());
    return t;
}

std::vector<int32_t> Artifact::i32_vector(const std::string& name) const {
    const ArtifactSection& s = section(name);
    if (s.dtype != SectionDtype::i32)
        throw ParseError("artifact: section '" + name + "' is not i32");
    std::vector<int32_t> v(s.elem_count());
    std::memcpy(v.data(), s.payload.data(), s.payload.size());
    return v;
}

std::vector<uint64_t> Artifact::u64_vector(const std::string& name) const {
    const ArtifactSection& s = section(name);
    if (s.dtype != SectionDtype::u64)
        throw ParseError("artifact: section '" + name + "' is not u64");
    std::vector<uint64_t> v(s.elem_count());
    std::memcpy(v.data(), s.payload.data(), s.payload.size());
    return v;
}

std::string Artifact::bytes_string(const std::string& name) const {
    const ArtifactSection& s = section(name);
    return std::string(s.payload.begin(), s.payload.end());
}

void save_artifact(const Artifact& a, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParseError("cannot write artifact: " + path);
    out.write(kMagic, 4);
    write_pod(out, kVersion);
    write_pod(out, static_cast<uint8_t>(a.kind));
    write_pod(out, a.config_hash);
    write_pod(out, static_cast<uint32_t>(a.sections.size()));
    for (const auto& s : a.sections) {
        write_pod(out, static_cast<uint16_t>(s.name.size()));
        out.write(s.name.data(), static_cast<std::streamsize>(s.name.size()));
        write_pod(out, static_cast<uint8_t>(s.dtype));
        write_pod(out, static_cast<uint8_t>(s.dims.size()));
        for (uint64_t d : s.dims) write_pod(out, d);
        out.write(reinterpret_cast<const char*>(s.payload.data()),
                  static_cast<std::streamsize>(s.payload.size()));
    }
    if (!out) throw ParseError("write failed: " + path);
}

Artifact load_artifact(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open artifact: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw ParseError("artifact " + path + ": bad magic, not a P2RC file");
    uint16_t version;
    read_pod(in, version, path);
    if (version != kVersion)
        throw ParseError(format("artifact %s: unsupported version %u (expected %u)", path.c_str(),
                                version, kVersion));
    Artifact a;
    uint8_t kind;
    read_pod(in, kind, path);
    a.kind = static_cast<ArtifactKind>(kind);
    read_pod(in, a.config_hash, path);
    uint32_t n_sections;
    read_pod(in, n_sections, path);
    for (uint32_t i = 0; i < n_sections; ++i) {
        ArtifactSection s;
        uint16_t name_len;
        read_pod(in, name_len, path);
        s.name.resize(name_len);
        in.read(s.name.data(), name_len);
        if (!in) throw ParseError("artifact " + path + ": truncated file");
        uint8_t dtype, ndim;
        read_pod(in, dtype, path);
        read_pod(in, ndim, path);
        s.dtype = static_cast<SectionDtype>(dtype);
        s.dims.resize(ndim);
        for (auto& d : s.dims) read_pod(in, d, path);
        s.payload.resize(s.elem_count() * dtype_size(s.dtype));
        in.read(reinterpret_cast<char*>(s.payload.data()),
                static_cast<std::streamsize>(s.payload.size()));
        if (!in) throw ParseError("artifact " + path + ": truncated file");
        a.sections.push_back(std::move(s));
    }
    return a;
}

Artifact load_artifact(const std::string& path, ArtifactKind expected_kind) {
    Artifact a = load_artifact(path);
    if (a.kind != expected_kind)
        throw ParseError(format("artifact %s: kind is %s, expected %s", path.c_str(),
                                artifact_kind_name(a.kind), artifact_kind_name(expected_kind)));
    return a;
}

Artifact params_to_artifact(const ParamSet<float>& params, uint64_t config_hash) {
    Artifact a;
    a.kind = ArtifactKind::checkpoint;
    a.config_hash = config_hash;
    for (const auto& p : params) {
        std::vector<uint64_t> dims(p->value.shape.begin(), p->value.shape.end());
        a.add_f32("p:" + p->name, p->value.data(), std::move(dims));
    }
    return a;
}

void load_params_from_artifact(const Artifact& a, ParamSet<float>& params) {
    for (auto& p : params) {
        Tensor<float> t = a.f32_tensor("p:" + p->name);
        if (t.shape != p->value.shape)
            throw ParseError("checkpoint: shape mismatch for parameter " + p->name);
        p->value = std::move(t);
    }
}

uint64_t file_fnv1a64(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open file for hashing: " + path);
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
        h = fnv1a64(buf, static_cast<size_t>(in.gcount()), h);
    return h;
}

}  // namespace p2rec
