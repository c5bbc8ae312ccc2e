#include "advcloak/serialize.hpp"

#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "advcloak/errors.hpp"
#include "advcloak/rng.hpp"

namespace advcloak {

namespace {

constexpr char kMagic[4] = {'A', 'C', 'A', 'R'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& path) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("truncated archive: " + path);
    return v;
}

void put_string(std::ostream& os, const std::string& s) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is, const std::string& path) {
    auto n = get<std::uint32_t>(is, path);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw IoError("truncated archive: " + path);
    return s;
}

}  // namespace

std::uint64_t tensors_hash(const NamedTensorViews& tensors) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, t] : tensors) {
        h = fnv1a64(name, h);
        h = t->content_hash(h);
    }
    return h;
}

void save_archive(const std::string& path, const std::string& kind, const nlohmann::json& meta,
                  const NamedTensorViews& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    os.write(kMagic, 4);
    put(os, kVersion);
    put_string(os, kind);
    put_string(os, meta.dump());
    put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        put_string(os, name);
        put<std::uint32_t>(os, static_cast<std::uint32_t>(t->dims.size()));
        for (int d : t->dims) put<std::int32_t>(os, d);
        put<std::uint64_t>(os, static_cast<std::uint64_t>(t->v.size()));
        os.write(reinterpret_cast<const char*>(t->v.data()),
                 static_cast<std::streamsize>(t->v.size() * sizeof(double)));
    }
    put<std::uint64_t>(os, tensors_hash(tensors));
    if (!os) throw IoError("write failed: " + path);
}

nlohmann::json load_archive(const std::string& path, const std::string& expected_kind,
                            const NamedTensorRefs& tensors) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("not an advcloak archive: " + path);
    auto ver = get<std::uint32_t>(is, path);
    if (ver != kVersion) throw IoError("unsupported archive version in " + path);
    std::string kind = get_string(is, path);
    if (kind != expected_kind)
        throw IoError("archive kind mismatch in " + path + ": expected " + expected_kind +
                      ", found " + kind);
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(get_string(is, path));
    } catch (const nlohmann::json::exception&) {
        throw IoError("corrupt metadata block in " + path);
    }

    auto count = get<std::uint32_t>(is, path);
    std::vector<std::pair<std::string, Tensor>> loaded;
    loaded.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = get_string(is, path);
        auto rank = get<std::uint32_t>(is, path);
        std::vector<int> dims(rank);
        for (auto& d : dims) d = get<std::int32_t>(is, path);
        auto n = get<std::uint64_t>(is, path);
        Tensor t(dims);
        if (static_cast<std::uint64_t>(t.numel()) != n)
            throw IoError("corrupt tensor header in " + path);
        is.read(reinterpret_cast<char*>(t.v.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
        if (!is) throw IoError("truncated archive: " + path);
        loaded.emplace_back(std::move(name), std::move(t));
    }
    auto stored_hash = get<std::uint64_t>(is, path);
    NamedTensorViews views;
    for (const auto& [name, t] : loaded) views.emplace_back(name, &t);
    if (tensors_hash(views) != stored_hash)
        throw IoError("content hash mismatch (corrupt archive): " + path);

    for (const auto& [name, sink] : tensors) {
        auto it = std::find_if(loaded.begin(), loaded.end(),
                               [&](const auto& p) { return p.first == name; });
        if (it == loaded.end()) throw IoError("missing tensor '" + name + "' in " + path);
        if (it->second.dims != sink->dims)
            throw IoError("tensor shape mismatch for '" + name + "' in " + path);
        *sink = it->second;
    }
    return meta;
}

nlohmann::json peek_archive(const std::string& path, std::string* kind_out) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("not an advcloak archive: " + path);
    auto ver = get<std::uint32_t>(is, path);
    if (ver != kVersion) throw IoError("unsupported archive version in " + path);
    std::string kind = get_string(is, path);
    if (kind_out) *kind_out = kind;
    try {
        return nlohmann::json::parse(get_string(is, path));
    } catch (const nlohmann::json::exception&) {
        throw IoError("corrupt metadata block in " + path);
    }
}

std::uint64_t file_hash(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[4096];
    while (is) {
        is.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<std::size_t>(is.gcount()), h);
    }
    return h;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    os << content;
    if (!os) throw IoError("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace advcloak
