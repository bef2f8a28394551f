#pragma once

#include "steerfuse/arch/network.hpp"

#include "json.hpp"

#include <filesystem>

namespace steerfuse::arch {

/// Layout: 8-byte magic "SFCKPT01", uint64 LE header length, UTF-8 JSON header,
/// then every parameter as float32 LE in parameters() order.
inline constexpr char checkpoint_magic[9] = "SFCKPT01";

struct CheckpointMeta {
    Variant variant = Variant::cgdual;
    Geometry geometry;
    NormStats norm;
    std::uint64_t seed = 0;
    nlohmann::json extra = nlohmann::json::object(); // training bookkeeping
};

struct LoadedCheckpoint {
    CheckpointMeta meta;
    Network<float> network;
};

void save_checkpoint(const std::filesystem::path& path, const Network<float>& net, const CheckpointMeta& meta);
/// Throws io::FormatError on a bad magic, truncated payload or a parameter
/// list that does not match the declared architecture.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json to_json(const Geometry& g);
Geometry geometry_from_json(const nlohmann::json& j);
nlohmann::json to_json(const NormStats& s);
NormStats norm_from_json(const nlohmann::json& j);

} // namespace steerfuse::arch
