#include "vag/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace vag {

namespace {

template <class T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::istream& is, const std::string& what) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("checkpoint: truncated while reading " + what);
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointMap& records) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("checkpoint: cannot open '" + path + "' for writing");
    os.write("VAGC", 4);
    put<uint32_t>(os, kCheckpointVersion);
    put<uint32_t>(os, static_cast<uint32_t>(records.size()));
    for (const auto& [name, rec] : records) {
        check(name.size() <= 0xffff, "checkpoint: name too long: " + name);
        put<uint16_t>(os, static_cast<uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        check(rec.shape.size() <= 0xff, "checkpoint: rank too large for " + name);
        put<uint8_t>(os, static_cast<uint8_t>(rec.shape.size()));
        for (int e : rec.shape) put<uint32_t>(os, static_cast<uint32_t>(e));
        check(static_cast<int64_t>(rec.data.size()) == numel(rec.shape),
              "checkpoint: payload size mismatch for " + name);
        os.write(reinterpret_cast<const char*>(rec.data.data()),
                 static_cast<std::streamsize>(rec.data.size() * sizeof(float)));
    }
    if (!os) throw IoError("checkpoint: write failed for '" + path + "'");
}

CheckpointMap load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "VAGC", 4) != 0)
        throw IoError("checkpoint: '" + path + "' is not a VAGC file");
    uint32_t version = take<uint32_t>(is, "version");
    if (version != kCheckpointVersion)
        throw IoError("checkpoint: unsupported version " + std::to_string(version));
    uint32_t count = take<uint32_t>(is, "count");
    CheckpointMap out;
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t len = take<uint16_t>(is, "name length");
        std::string name(len, '\0');
        is.read(name.data(), len);
        if (!is) throw IoError("checkpoint: truncated name");
        uint8_t rank = take<uint8_t>(is, "rank");
        CheckpointRecord rec;
        rec.shape.resize(rank);
        for (int d = 0; d < rank; ++d)
            rec.shape[static_cast<size_t>(d)] = static_cast<int>(take<uint32_t>(is, "extent"));
        rec.data.resize(static_cast<size_t>(numel(rec.shape)));
        is.read(reinterpret_cast<char*>(rec.data.data()),
                static_cast<std::streamsize>(rec.data.size() * sizeof(float)));
        if (!is) throw IoError("checkpoint: truncated payload for " + name);
        out.emplace(std::move(name), std::move(rec));
    }
    return out;
}

CheckpointMap pack_params(const ParamStore& store, bool with_moments) {
    CheckpointMap out;
    for (const auto& [name, p] : store.all()) {
        out[name] = {p.tensor.shape(), p.tensor.vec()};
        if (with_moments) {
            out[name + ".m1"] = {p.tensor.shape(), p.m1};
            out[name + ".m2"] = {p.tensor.shape(), p.m2};
        }
    }
    return out;
}

void unpack_params(const CheckpointMap& records, ParamStore& store) {
    for (auto& [name, p] : store.all()) {
        auto it = records.find(name);
        check(it != records.end(), "checkpoint: missing parameter '" + name + "'");
        check_shape(it->second.shape == p.tensor.shape(),
                    "checkpoint: shape mismatch for '" + name + "': file " +
                        shape_str(it->second.shape) + " vs model " + shape_str(p.tensor.shape()));
        p.tensor.vec() = it->second.data;
        auto m1 = records.find(name + ".m1");
        auto m2 = records.find(name + ".m2");
        if (m1 != records.end()) p.m1 = m1->second.data;
        if (m2 != records.end()) p.m2 = m2->second.data;
    }
}

}  // namespace vag
