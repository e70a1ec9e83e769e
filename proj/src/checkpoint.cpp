#include "symseg/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "symseg/errors.hpp"

namespace symseg::ckpt {

namespace {
constexpr char kMagic[8] = {'S', 'Y', 'M', 'S', 'E', 'G', 'C', 'K'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}
}  // namespace

void save(const std::string& path, const nn::Module& module, nlohmann::json header) {
    auto params = module.named_parameters();
    nlohmann::json table = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& [name, p] : params) {
        nlohmann::json entry;
        entry["name"] = name;
        entry["shape"] = p->value.shape();
        entry["offset"] = offset;
        entry["nbytes"] = static_cast<uint64_t>(p->value.numel()) * sizeof(float);
        table.push_back(entry);
        offset += static_cast<uint64_t>(p->value.numel()) * sizeof(float);
    }
    header["tensors"] = table;
    header["format"] = "symseg-checkpoint";
    const std::string htext = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeFailure("cannot open checkpoint for writing: " + path);
    out.write(kMagic, sizeof(kMagic));
    write_pod<uint32_t>(out, kVersion);
    write_pod<uint64_t>(out, htext.size());
    out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (const auto& [name, p] : params)
        out.write(reinterpret_cast<const char*>(p->value.data()),
                  static_cast<std::streamsize>(p->value.numel() * sizeof(float)));
    if (!out) throw RuntimeFailure("short write while saving checkpoint: " + path);
}

namespace {
nlohmann::json read_header_stream(std::istream& in, const std::string& path) {
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw ValidationError("not a symseg checkpoint: " + path);
    const uint32_t version = read_pod<uint32_t>(in);
    if (version != kVersion)
        throw ValidationError("unsupported checkpoint version " + std::to_string(version));
    const uint64_t hlen = read_pod<uint64_t>(in);
    std::string htext(hlen, '\0');
    in.read(htext.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw RuntimeFailure("truncated checkpoint header: " + path);
    return nlohmann::json::parse(htext);
}
}  // namespace

nlohmann::json read_header(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw RuntimeFailure("cannot open checkpoint: " + path);
    return read_header_stream(in, path);
}

void load_into(const std::string& path, nn::Module& module) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw RuntimeFailure("cannot open checkpoint: " + path);
    nlohmann::json header = read_header_stream(in, path);
    const std::streampos payload_start = in.tellg();

    auto params = module.named_parameters();
    std::map<std::string, ag::Var> by_name;
    for (auto& [name, p] : params) by_name[name] = p;

    size_t filled = 0;
    for (const auto& entry : header.at("tensors")) {
        const std::string name = entry.at("name");
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw ValidationError("checkpoint tensor '" + name + "' has no matching parameter");
        Tensor& dst = it->second->value;
        const Shape shape = entry.at("shape").get<Shape>();
        if (shape != dst.shape())
            throw ValidationError("checkpoint tensor '" + name + "' shape " + shape_str(shape) +
                                  " does not match parameter " + shape_str(dst.shape()));
        in.seekg(payload_start + static_cast<std::streamoff>(entry.at("offset").get<uint64_t>()));
        in.read(reinterpret_cast<char*>(dst.data()),
                static_cast<std::streamsize>(dst.numel() * sizeof(float)));
        if (!in) throw RuntimeFailure("truncated checkpoint payload: " + path);
        ++filled;
    }
    if (filled != params.size())
        throw ValidationError("checkpoint fills " + std::to_string(filled) + " of " +
                              std::to_string(params.size()) + " parameters");
}

}  // namespace symseg::ckpt
