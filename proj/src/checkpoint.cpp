#include "ttt4rec/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace ttt4rec {

namespace {

constexpr char kMagic[8] = {'T', 'T', 'T', '4', 'R', 'E', 'C', '1'};

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t len) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::uint64_t fnv1a_str(std::uint64_t h, const std::string& s) {
    return fnv1a(h, s.data(), s.size());
}

void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) {
        throw IoError("checkpoint truncated: " + path);
    }
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f32(std::ostream& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(out, bits);
}

float read_f32(std::istream& in, const std::string& path) {
    const std::uint32_t bits = read_u32(in, path);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

std::string digest_hex(std::uint64_t digest) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(digest));
    return std::string(buf);
}

}  // namespace

std::uint64_t config_digest(const ModelConfig& cfg, Index vocab) {
    std::ostringstream canon;
    canon << "embed_dim=" << cfg.embed_dim << ";blocks=" << cfg.blocks
          << ";backbone=" << backbone_name(cfg.backbone) << ";inner=" << inner_name(cfg.inner)
          << ";inner_hidden=" << cfg.inner_hidden << ";rope_factor=" << cfg.rope_factor
          << ";max_context=" << cfg.max_context << ";conv_width=" << cfg.conv_width
          << ";tie_head=" << (cfg.tie_head ? 1 : 0) << ";vocab=" << vocab;
    return fnv1a_str(0xcbf29ce484222325ull, canon.str());
}

void checkpoint_save(const Model& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write checkpoint: " + path);
    }
    out.write(kMagic, sizeof(kMagic));
    out << "v1 digest=" << digest_hex(config_digest(model.config(), model.vocab())) << "\n";
    for (const auto& [name, p] : model.named_parameters()) {
        write_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        out.put(static_cast<char>(0));  // dtype f32
        out.put(static_cast<char>(p->shape.size()));
        for (Index dim : p->shape) {
            write_u32(out, static_cast<std::uint32_t>(dim));
        }
        for (double v : p->data) {
            write_f32(out, static_cast<float>(v));
        }
    }
    if (!out) {
        throw IoError("failed while writing checkpoint: " + path);
    }
}

Model checkpoint_load(const std::string& path, const ModelConfig& cfg, Index vocab) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open checkpoint: " + path);
    }
    char magic[8];
    if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw IoError("not a ttt4rec checkpoint: " + path);
    }
    std::string header;
    if (!std::getline(in, header)) {
        throw IoError("checkpoint missing header line: " + path);
    }
    if (header.rfind("v1 ", 0) != 0) {
        throw IoError("unsupported checkpoint version: " + header);
    }
    const std::string expected = "v1 digest=" + digest_hex(config_digest(cfg, vocab));
    if (header != expected) {
        throw ConfigError("checkpoint was written for a different configuration (header '" +
                          header + "', expected '" + expected + "')");
    }

    Model model(cfg, vocab);
    auto params = model.named_parameters();
    std::size_t loaded = 0;
    for (auto& [name, p] : params) {
        const std::uint32_t name_len = read_u32(in, path);
        std::string stored(name_len, '\0');
        if (!in.read(stored.data(), name_len)) {
            throw IoError("checkpoint truncated: " + path);
        }
        if (stored != name) {
            throw IoError("checkpoint tensor order mismatch: expected '" + name + "', found '" +
                          stored + "'");
        }
        const int dtype = in.get();
        const int rank = in.get();
        if (dtype != 0 || rank < 0) {
            throw IoError("unsupported tensor encoding for '" + name + "'");
        }
        Shape shape(static_cast<std::size_t>(rank));
        for (auto& dim : shape) {
            dim = static_cast<Index>(read_u32(in, path));
        }
        if (shape != p->shape) {
            throw ConfigError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) +
                              ", model expects " + shape_str(p->shape));
        }
        for (auto& v : p->data) {
            v = static_cast<double>(read_f32(in, path));
        }
        ++loaded;
    }
    // Anything left over means the file came from a different parameter set.
    if (in.peek() != std::ifstream::traits_type::eof()) {
        throw IoError("checkpoint has trailing tensors beyond the " + std::to_string(loaded) +
                      " expected: " + path);
    }
    return model;
}

}  // namespace ttt4rec
