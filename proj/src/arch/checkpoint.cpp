#include "steerfuse/arch/checkpoint.hpp"

#include "steerfuse/util/binary_io.hpp"

#include <cstring>
#include <fstream>

namespace steerfuse::arch {

using nlohmann::json;

namespace {

json block_json(const BlockGeometry& b)
{
    json layers = json::array();
    for (const ConvLayerGeometry& l : b.layers) {
        layers.push_back({{"out_channels", l.out_channels},
                          {"kernel", {l.kernel_h, l.kernel_w}},
                          {"stride", {l.stride_h, l.stride_w}}});
    }
    return {{"input", {b.in_channels, b.in_h, b.in_w}}, {"layers", layers}};
}

BlockGeometry block_from_json(const json& j)
{
    BlockGeometry b;
    const auto in = j.at("input").get<std::vector<std::size_t>>();
    if (in.size() != 3) {
        throw io::FormatError("block input must be [channels, height, width]");
    }
    b.in_channels = in[0];
    b.in_h = in[1];
    b.in_w = in[2];
    for (const json& l : j.at("layers")) {
        ConvLayerGeometry g;
        g.out_channels = l.at("out_channels").get<std::size_t>();
        const auto k = l.at("kernel").get<std::vector<std::size_t>>();
        const auto s = l.at("stride").get<std::vector<std::size_t>>();
        if (k.size() != 2 || s.size() != 2) {
            throw io::FormatError("kernel and stride must have two entries");
        }
        g.kernel_h = k[0];
        g.kernel_w = k[1];
        g.stride_h = s[0];
        g.stride_w = s[1];
        b.layers.push_back(g);
    }
    return b;
}

} // namespace

json to_json(const Geometry& g)
{
    return {{"camera", block_json(g.camera)}, {"lidar", block_json(g.lidar)}, {"hidden", g.hidden}};
}

Geometry geometry_from_json(const json& j)
{
    Geometry g;
    g.camera = block_from_json(j.at("camera"));
    g.lidar = block_from_json(j.at("lidar"));
    g.hidden = j.at("hidden").get<std::size_t>();
    return g;
}

json to_json(const NormStats& s)
{
    return {{"camera_mean", s.camera_mean},
            {"camera_std", s.camera_std},
            {"lidar_mean", s.lidar_mean},
            {"lidar_std", s.lidar_std}};
}

NormStats norm_from_json(const json& j)
{
    NormStats s;
    s.camera_mean = j.at("camera_mean").get<std::array<double, 3>>();
    s.camera_std = j.at("camera_std").get<std::array<double, 3>>();
    s.lidar_mean = j.at("lidar_mean").get<std::array<double, 4>>();
    s.lidar_std = j.at("lidar_std").get<std::array<double, 4>>();
    validate(s);
    return s;
}

void save_checkpoint(const std::filesystem::path& path, const Network<float>& net, const CheckpointMeta& meta)
{
    if (meta.variant != net.variant() || meta.geometry != net.geometry()) {
        throw std::invalid_argument("checkpoint metadata does not describe the network");
    }
    json params = json::array();
    std::size_t total = 0;
    for (const nn::Parameter<float>* p : net.parameters()) {
        params.push_back({{"name", p->name}, {"shape", p->value.shape()}});
        total += p->value.size();
    }
    const json header = {{"format", "steerfuse-checkpoint"},
                         {"version", 1},
                         {"variant", std::string(to_string(meta.variant))},
                         {"geometry", to_json(meta.geometry)},
                         {"norm", to_json(meta.norm)},
                         {"seed", meta.seed},
                         {"parameters", params},
                         {"extra", meta.extra}};
    const std::string text = header.dump();
    std::vector<unsigned char> buf;
    buf.reserve(16 + text.size() + 4 * total);
    buf.insert(buf.end(), checkpoint_magic, checkpoint_magic + 8);
    io::append_u64(buf, text.size());
    for (char ch : text) {
        buf.push_back(static_cast<unsigned char>(ch));
    }
    for (const nn::Parameter<float>* p : net.parameters()) {
        io::append_f32(buf, p->value.data());
    }
    const std::filesystem::path tmp = path.string() + ".partial";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) {
            throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        }
        io::write_all(os, buf, tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw std::runtime_error("cannot open checkpoint " + path.string());
    }
    unsigned char head[16];
    io::read_exact(is, head, "checkpoint header in " + path.string());
    if (std::memcmp(head, checkpoint_magic, 8) != 0) {
        throw io::FormatError(path.string() + " is not a steerfuse checkpoint (bad magic)");
    }
    const std::uint64_t len = io::read_u64(head + 8);
    if (len > (std::uint64_t{1} << 26)) {
        throw io::FormatError("implausible checkpoint header length in " + path.string());
    }
    std::string text(len, '\0');
    io::read_exact(is, {reinterpret_cast<unsigned char*>(text.data()), text.size()}, "checkpoint header");
    json header;
    CheckpointMeta meta;
    try {
        header = json::parse(text);
        if (header.at("version").get<int>() != 1) {
            throw io::FormatError("unsupported checkpoint version");
        }
        meta.variant = parse_variant(header.at("variant").get<std::string>());
        meta.geometry = geometry_from_json(header.at("geometry"));
        meta.norm = norm_from_json(header.at("norm"));
        meta.seed = header.at("seed").get<std::uint64_t>();
        meta.extra = header.value("extra", json::object());
    } catch (const json::exception& e) {
        throw io::FormatError("bad checkpoint header in " + path.string() + ": " + e.what());
    }
    LoadedCheckpoint out{meta, Network<float>(meta.variant, meta.geometry, meta.seed)};
    const auto params = out.network.parameters();
    const json& declared = header.at("parameters");
    if (declared.size() != params.size()) {
        throw io::FormatError("checkpoint declares " + std::to_string(declared.size()) + " parameters, architecture has " +
                              std::to_string(params.size()));
    }
    std::vector<unsigned char> raw;
    for (std::size_t i = 0; i < params.size(); ++i) {
        nn::Parameter<float>& p = *params[i];
        if (declared[i].at("name").get<std::string>() != p.name ||
            declared[i].at("shape").get<nn::Shape>() != p.value.shape()) {
            throw io::FormatError("checkpoint parameter " + std::to_string(i) + " is '" +
                                  declared[i].at("name").get<std::string>() + "', expected '" + p.name + "' " +
                                  nn::to_string(p.value.shape()));
        }
        raw.resize(4 * p.value.size());
        io::read_exact(is, raw, "payload of '" + p.name + "' in " + path.string());
        io::read_f32(raw.data(), p.value.data());
    }
    if (is.peek() != std::char_traits<char>::eof()) {
        throw io::FormatError("trailing bytes after checkpoint payload in " + path.string());
    }
    return out;
}

} // namespace steerfuse::arch
