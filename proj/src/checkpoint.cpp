#include "nfpf/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "nfpf/errors.hpp"

namespace nfpf {

namespace {

constexpr const char* kMagic = "nfpf-ckpt v1";

void put_le(std::ostream& out, double value) {
    auto bits = std::bit_cast<std::uint64_t>(value);
    char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
    out.write(bytes, 8);
}

double get_le(const unsigned char* bytes) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    return std::bit_cast<double>(bits);
}

std::string read_line(std::istream& in, const std::filesystem::path& path) {
    std::string line;
    if (!std::getline(in, line)) throw DataError("truncated checkpoint " + path.string());
    return line;
}

}  // namespace

Checkpoint snapshot(const ParamList& params) {
    Checkpoint ckpt;
    for (const auto& p : params) {
        ckpt.manifest.push_back({p.name, p.tensor->shape()});
        auto data = p.tensor->data();
        ckpt.values.insert(ckpt.values.end(), data.begin(), data.end());
    }
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const ParamList& params) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    auto ckpt = snapshot(params);
    out << kMagic << '\n' << ckpt.manifest.size() << '\n';
    for (const auto& entry : ckpt.manifest) {
        out << entry.name << ' ' << entry.shape.size();
        for (auto e : entry.shape) out << ' ' << e;
        out << '\n';
    }
    out << "data " << ckpt.values.size() << '\n';
    for (double v : ckpt.values) put_le(out, v);
    if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    if (read_line(in, path) != kMagic) throw DataError("not an nfpf checkpoint: " + path.string());

    Checkpoint ckpt;
    std::size_t count = 0;
    {
        std::istringstream line(read_line(in, path));
        if (!(line >> count)) throw DataError("bad parameter count in " + path.string());
    }
    std::size_t expected = 0;
    for (std::size_t i = 0; i < count; ++i) {
        std::istringstream line(read_line(in, path));
        ManifestEntry entry;
        std::size_t rank = 0;
        if (!(line >> entry.name >> rank)) throw DataError("bad manifest line in " + path.string());
        entry.shape.resize(rank);
        for (auto& e : entry.shape) {
            if (!(line >> e)) throw DataError("bad shape for " + entry.name + " in " + path.string());
        }
        expected += ad::numel(entry.shape);
        ckpt.manifest.push_back(std::move(entry));
    }
    std::size_t total = 0;
    {
        std::istringstream line(read_line(in, path));
        std::string tag;
        if (!(line >> tag >> total) || tag != "data" || total != expected) {
            throw DataError("checkpoint data header inconsistent with manifest in " + path.string());
        }
    }
    std::vector<unsigned char> raw(total * 8);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
        throw DataError("checkpoint payload truncated in " + path.string());
    }
    ckpt.values.resize(total);
    for (std::size_t i = 0; i < total; ++i) ckpt.values[i] = get_le(raw.data() + 8 * i);
    return ckpt;
}

void load_checkpoint(const Checkpoint& checkpoint, const ParamList& params) {
    if (checkpoint.manifest.size() != params.size()) {
        throw DataError("checkpoint holds " + std::to_string(checkpoint.manifest.size()) +
                        " parameters, model expects " + std::to_string(params.size()));
    }
    std::size_t offset = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& entry = checkpoint.manifest[i];
        const auto& p = params[i];
        if (entry.name != p.name || entry.shape != p.tensor->shape()) {
            throw DataError("checkpoint parameter " + entry.name + " " + ad::shape_string(entry.shape) +
                            " does not match model parameter " + p.name + " " +
                            ad::shape_string(p.tensor->shape()));
        }
        auto dst = p.tensor->mutable_data();
        std::copy_n(checkpoint.values.begin() + static_cast<std::ptrdiff_t>(offset), dst.size(), dst.begin());
        offset += dst.size();
    }
}

void load_checkpoint(const std::filesystem::path& path, const ParamList& params) {
    load_checkpoint(read_checkpoint(path), params);
}

}  // namespace nfpf
