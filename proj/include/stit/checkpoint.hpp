#pragma once

// Checkpoint container: "STIT" magic, u32 format version, u64 manifest
// length, JSON manifest (tensor names/shapes/offsets, optimizer moments,
// tokenizer, configs, RNG state, step counter), float32 little-endian
// payload, trailing CRC-32 of the payload.

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "stit/params.hpp"
#include "stit/tensor.hpp"

namespace stit {

class CheckpointError : public std::runtime_error {
public:
    explicit CheckpointError(const std::string& what) : std::runtime_error(what) {}
};

inline uint32_t crc32_ieee(const uint8_t* data, size_t len, uint32_t crc = 0) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    crc = ~crc;
    for (size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
    return ~crc;
}

struct CheckpointExtras {
    nlohmann::json configs;    // opaque run configuration
    nlohmann::json tokenizer;  // vocabulary + specials
    std::array<uint64_t, 4> rng_state{};
    int64_t step_counter = 0;
};

namespace detail {

constexpr uint32_t kCheckpointVersion = 1;

inline void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline uint32_t get_u32(const uint8_t* p) {
    return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
}
inline uint64_t get_u64(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(p[i]) << (8 * i);
    return v;
}

inline void append_blob(std::string& payload, const std::vector<float>& v) {
    static_assert(sizeof(float) == 4);
    const size_t bytes = v.size() * 4;
    const size_t at = payload.size();
    payload.resize(at + bytes);
    std::memcpy(payload.data() + at, v.data(), bytes);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ParameterSet<float>& params,
                            const AdamOptimizer<float>& optimizer, const CheckpointExtras& extras) {
    nlohmann::json manifest;
    manifest["format"] = detail::kCheckpointVersion;
    manifest["configs"] = extras.configs;
    manifest["tokenizer"] = extras.tokenizer;
    manifest["rng_state"] = extras.rng_state;
    manifest["step_counter"] = extras.step_counter;
    manifest["params"] = nlohmann::json::array();

    std::string payload;
    for (const auto& [name, t] : params.entries()) {
        manifest["params"].push_back({{"name", name},
                                      {"shape", t.shape()},
                                      {"offset", payload.size()},
                                      {"count", t.numel()}});
        detail::append_blob(payload, t.data());
    }
    auto& opt_state = const_cast<AdamOptimizer<float>&>(optimizer).state();
    manifest["optimizer"] = {{"step", optimizer.step_count()}, {"moments", nlohmann::json::array()}};
    for (const auto& [name, t] : params.entries()) {
        auto it = opt_state.find(name);
        std::vector<float> m(t.numel(), 0.f), v(t.numel(), 0.f);
        if (it != opt_state.end()) {
            m = it->second.m;
            v = it->second.v;
            m.resize(t.numel(), 0.f);
            v.resize(t.numel(), 0.f);
        }
        manifest["optimizer"]["moments"].push_back(
            {{"name", name}, {"offset_m", payload.size()}, {"count", t.numel()}});
        detail::append_blob(payload, m);
        manifest["optimizer"]["moments"].back()["offset_v"] = payload.size();
        detail::append_blob(payload, v);
    }

    const std::string manifest_str = manifest.dump();
    std::string head = "STIT";
    detail::put_u32(head, detail::kCheckpointVersion);
    detail::put_u64(head, manifest_str.size());

    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot open '" + path + "' for writing");
    out.write(head.data(), std::streamsize(head.size()));
    out.write(manifest_str.data(), std::streamsize(manifest_str.size()));
    out.write(payload.data(), std::streamsize(payload.size()));
    const uint32_t crc = crc32_ieee(reinterpret_cast<const uint8_t*>(payload.data()), payload.size());
    std::string tail;
    detail::put_u32(tail, crc);
    out.write(tail.data(), 4);
    if (!out) throw CheckpointError("short write to '" + path + "'");
}

inline CheckpointExtras load_checkpoint(const std::string& path, ParameterSet<float>& params,
                                        AdamOptimizer<float>& optimizer) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open '" + path + "'");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    if (bytes.size() < 20) throw CheckpointError("'" + path + "': truncated file");
    if (std::memcmp(bytes.data(), "STIT", 4) != 0)
        throw CheckpointError("'" + path + "': bad magic, not a checkpoint");
    const uint32_t version = detail::get_u32(bytes.data() + 4);
    if (version != detail::kCheckpointVersion)
        throw CheckpointError("'" + path + "': format version " + std::to_string(version) +
                              ", expected " + std::to_string(detail::kCheckpointVersion));
    const uint64_t manifest_len = detail::get_u64(bytes.data() + 8);
    if (16 + manifest_len + 4 > bytes.size())
        throw CheckpointError("'" + path + "': truncated manifest");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + manifest_len);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("'" + path + "': bad manifest: " + e.what());
    }
    const uint8_t* payload = bytes.data() + 16 + manifest_len;
    const size_t payload_len = bytes.size() - 16 - manifest_len - 4;
    const uint32_t want_crc = detail::get_u32(bytes.data() + bytes.size() - 4);
    if (crc32_ieee(payload, payload_len) != want_crc)
        throw CheckpointError("'" + path + "': payload checksum failure");

    auto read_blob = [&](size_t offset, size_t count) {
        if (offset + count * 4 > payload_len)
            throw CheckpointError("'" + path + "': truncated payload");
        std::vector<float> v(count);
        std::memcpy(v.data(), payload + offset, count * 4);
        return v;
    };

    params = ParameterSet<float>();
    for (const auto& pj : manifest.at("params")) {
        auto shape = pj.at("shape").get<Shape>();
        auto data = read_blob(pj.at("offset").get<size_t>(), pj.at("count").get<size_t>());
        params.add(pj.at("name").get<std::string>(),
                   Tensor<float>::from_vector(std::move(data), std::move(shape)));
    }
    optimizer.state().clear();
    optimizer.set_step_count(manifest.at("optimizer").at("step").get<int64_t>());
    for (const auto& mj : manifest.at("optimizer").at("moments")) {
        auto& st = optimizer.state()[mj.at("name").get<std::string>()];
        const size_t count = mj.at("count").get<size_t>();
        st.m = read_blob(mj.at("offset_m").get<size_t>(), count);
        st.v = read_blob(mj.at("offset_v").get<size_t>(), count);
    }

    CheckpointExtras extras;
    extras.configs = manifest.at("configs");
    extras.tokenizer = manifest.at("tokenizer");
    extras.rng_state = manifest.at("rng_state").get<std::array<uint64_t, 4>>();
    extras.step_counter = manifest.at("step_counter").get<int64_t>();
    return extras;
}

}  // namespace stit
