#include "steerfuse/arch/network.hpp"

#include <cmath>

namespace steerfuse::arch {

std::string_view to_string(Variant v)
{
    switch (v) {
    case Variant::camera:
        return "camera";
    case Variant::lidar:
        return "lidar";
    case Variant::dual:
        return "dual";
    case Variant::cgdual:
        return "cgdual";
    }
    return "?";
}

Variant parse_variant(std::string_view id)
{
    if (id == "camera") {
        return Variant::camera;
    }
    if (id == "lidar") {
        return Variant::lidar;
    }
    if (id == "dual") {
        return Variant::dual;
    }
    if (id == "cgdual") {
        return Variant::cgdual;
    }
    throw std::invalid_argument("unknown architecture id '" + std::string(id) +
                                "' (expected camera, lidar, dual or cgdual)");
}

std::string_view to_string(Modality m)
{
    return m == Modality::camera ? "camera" : "lidar";
}

bool uses(Variant v, Modality m)
{
    switch (v) {
    case Variant::camera:
        return m == Modality::camera;
    case Variant::lidar:
        return m == Modality::lidar;
    default:
        return true;
    }
}

Geometry full_resolution_geometry()
{
    Geometry g;
    g.camera = {3, 63, 306, {{24, 5, 5, 2, 2}, {36, 5, 5, 2, 2}, {48, 5, 5, 2, 2}, {64, 3, 3, 1, 1}, {64, 3, 3, 1, 1}}};
    g.lidar = {4, 11, 310, {{24, 3, 5, 1, 2}, {36, 3, 5, 1, 2}, {48, 3, 5, 1, 2}, {64, 3, 3, 1, 1}, {64, 3, 3, 1, 1}}};
    g.hidden = 100;
    return g;
}

Geometry half_resolution_geometry()
{
    Geometry g;
    g.camera = {3, 32, 153, {{24, 5, 5, 2, 2}, {36, 5, 5, 2, 2}, {48, 3, 3, 1, 1}, {64, 3, 3, 1, 1}, {64, 1, 3, 1, 1}}};
    g.lidar = {4, 11, 155, {{24, 3, 5, 1, 2}, {36, 3, 5, 1, 2}, {48, 3, 5, 1, 2}, {64, 3, 3, 1, 1}, {64, 3, 3, 1, 1}}};
    g.hidden = 100;
    return g;
}

std::vector<LayerShape> block_shapes(const BlockGeometry& g, std::string_view name)
{
    if (g.in_channels == 0 || g.in_h == 0 || g.in_w == 0) {
        throw GeometryError(std::string(name) + ": input extents must be positive");
    }
    if (g.layers.empty()) {
        throw GeometryError(std::string(name) + ": block has no conv layers");
    }
    std::vector<LayerShape> out;
    std::size_t c = g.in_channels;
    std::size_t h = g.in_h;
    std::size_t w = g.in_w;
    for (std::size_t i = 0; i < g.layers.size(); ++i) {
        const ConvLayerGeometry& l = g.layers[i];
        const std::string layer = std::string(name) + ".conv" + std::to_string(i + 1);
        if (l.out_channels == 0 || l.kernel_h == 0 || l.kernel_w == 0 || l.stride_h == 0 || l.stride_w == 0) {
            throw GeometryError(layer + ": channel, kernel and stride extents must be positive");
        }
        if (l.kernel_h > h || l.kernel_w > w) {
            throw GeometryError(layer + ": kernel " + std::to_string(l.kernel_h) + "x" + std::to_string(l.kernel_w) +
                                " does not fit input " + std::to_string(h) + "x" + std::to_string(w));
        }
        h = (h - l.kernel_h) / l.stride_h + 1;
        w = (w - l.kernel_w) / l.stride_w + 1;
        c = l.out_channels;
        out.push_back({layer, {c, h, w}});
    }
    return out;
}

std::size_t flattened_features(const BlockGeometry& g)
{
    return nn::element_count(block_shapes(g, "block").back().output);
}

std::size_t gate_count(const Geometry& g)
{
    return g.camera.layers.back().out_channels + g.lidar.layers.back().out_channels;
}

std::size_t head_input_features(Variant v, const Geometry& g)
{
    std::size_t n = 0;
    if (uses(v, Modality::camera)) {
        n += flattened_features(g.camera);
    }
    if (uses(v, Modality::lidar)) {
        n += flattened_features(g.lidar);
    }
    return n;
}

std::vector<LayerShape> shape_ledger(Variant v, const Geometry& g)
{
    std::vector<LayerShape> ledger;
    auto append = [&](const BlockGeometry& b, std::string_view name) {
        ledger.push_back({std::string(name) + ".input", {b.in_channels, b.in_h, b.in_w}});
        for (LayerShape& s : block_shapes(b, name)) {
            ledger.push_back(std::move(s));
        }
        ledger.push_back({std::string(name) + ".flatten", {flattened_features(b)}});
    };
    if (uses(v, Modality::camera)) {
        append(g.camera, "camera");
    }
    if (uses(v, Modality::lidar)) {
        append(g.lidar, "lidar");
    }
    if (v == Variant::cgdual) {
        append(g.camera, "gate.camera");
        append(g.lidar, "gate.lidar");
        ledger.push_back({"gate.concat", {head_input_features(v, g)}});
        ledger.push_back({"gate.sigmoid", {gate_count(g)}});
    }
    if (g.hidden == 0) {
        throw GeometryError("head.hidden: width must be positive");
    }
    ledger.push_back({"head.input", {head_input_features(v, g)}});
    ledger.push_back({"head.hidden", {g.hidden}});
    ledger.push_back({"head.output", {1}});
    return ledger;
}

void validate(const NormStats& s)
{
    for (double v : s.camera_std) {
        if (!(v > 0.0) || !std::isfinite(v)) {
            throw std::invalid_argument("NormStats: camera std must be positive");
        }
    }
    for (double v : s.lidar_std) {
        if (!(v > 0.0) || !std::isfinite(v)) {
            throw std::invalid_argument("NormStats: lidar std must be positive");
        }
    }
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> apply_gates(const Tensor<T>& gates, const Tensor<T>& camera_features,
                                            const Tensor<T>& lidar_features)
{
    if (camera_features.rank() != 4 || lidar_features.rank() != 4 || gates.rank() != 2) {
        throw nn::ShapeError("apply_gates expects N x 128 gates and N x C x H x W features");
    }
    const std::size_t n = gates.dim(0);
    const std::size_t cc = camera_features.dim(1);
    const std::size_t lc = lidar_features.dim(1);
    if (camera_features.dim(0) != n || lidar_features.dim(0) != n || gates.dim(1) != cc + lc) {
        throw nn::ShapeError("apply_gates: gates " + nn::to_string(gates.shape()) + " vs features " +
                             nn::to_string(camera_features.shape()) + ", " + nn::to_string(lidar_features.shape()));
    }
    auto scale = [&](const Tensor<T>& f, std::size_t offset) {
        Tensor<T> out = f;
        const std::size_t channels = f.dim(1);
        const std::size_t plane = f.dim(2) * f.dim(3);
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t c = 0; c < channels; ++c) {
                const T g = gates[b * gates.dim(1) + offset + c];
                T* p = out.data().data() + (b * channels + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    p[i] = g * p[i];
                }
            }
        }
        return out;
    };
    return {scale(camera_features, 0), scale(lidar_features, cc)};
}

template <typename T>
GateGrads<T> apply_gates_backward(const Tensor<T>& gates, const Tensor<T>& camera_features,
                                  const Tensor<T>& lidar_features, const Tensor<T>& camera_upstream,
                                  const Tensor<T>& lidar_upstream)
{
    const std::size_t n = gates.dim(0);
    const std::size_t width = gates.dim(1);
    GateGrads<T> g{Tensor<T>(gates.shape()), Tensor<T>(camera_features.shape()), Tensor<T>(lidar_features.shape())};
    auto run = [&](const Tensor<T>& f, const Tensor<T>& up, Tensor<T>& df, std::size_t offset) {
        if (up.size() != f.size()) {
            throw nn::ShapeError("apply_gates_backward: upstream " + nn::to_string(up.shape()) + " vs features " +
                                 nn::to_string(f.shape()));
        }
        const std::size_t channels = f.dim(1);
        const std::size_t plane = f.dim(2) * f.dim(3);
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t c = 0; c < channels; ++c) {
                const T gate = gates[b * width + offset + c];
                const std::size_t base = (b * channels + c) * plane;
                T acc{0};
                for (std::size_t i = 0; i < plane; ++i) {
                    df[base + i] = gate * up[base + i];
                    acc += f[base + i] * up[base + i];
                }
                g.gates[b * width + offset + c] = acc;
            }
        }
    };
    run(camera_features, camera_upstream, g.camera_features, 0);
    run(lidar_features, lidar_upstream, g.lidar_features, camera_features.dim(1));
    return g;
}

template <typename T>
ConvBlock<T>::ConvBlock(const BlockGeometry& g, const std::string& name, Rng& rng) : geometry_(g)
{
    block_shapes(g, name);
    std::size_t c = g.in_channels;
    for (std::size_t i = 0; i < g.layers.size(); ++i) {
        const ConvLayerGeometry& l = g.layers[i];
        layers_.emplace_back(nn::LayerSpec::conv(c, l.out_channels, l.kernel_h, l.kernel_w, l.stride_h, l.stride_w),
                             name + ".conv" + std::to_string(i + 1), rng);
        c = l.out_channels;
    }
}

template <typename T>
Tensor<T> ConvBlock<T>::forward(const Tensor<T>& x)
{
    activations_.clear();
    const Tensor<T>* cur = &x;
    for (nn::Conv2d<T>& layer : layers_) {
        activations_.push_back(nn::relu(layer.forward(*cur)));
        cur = &activations_.back();
    }
    return activations_.back();
}

template <typename T>
Tensor<T> ConvBlock<T>::backward(const Tensor<T>& upstream, bool input_grad)
{
    Tensor<T> g = upstream;
    for (std::size_t i = layers_.size(); i-- > 0;) {
        g = layers_[i].backward(nn::relu_backward(g, activations_[i]), i > 0 || input_grad);
    }
    return g;
}

template <typename T>
void ConvBlock<T>::collect(std::vector<nn::Parameter<T>*>& out)
{
    for (nn::Conv2d<T>& l : layers_) {
        out.push_back(&l.weight());
        out.push_back(&l.bias());
    }
}

template <typename T>
Network<T>::Network(Variant variant, Geometry geometry, std::uint64_t seed)
    : variant_(variant), geometry_(std::move(geometry)), seed_(seed)
{
    shape_ledger(variant_, geometry_);
    Rng rng(seed);
    if (uses(variant_, Modality::camera)) {
        camera_.emplace(geometry_.camera, "camera", rng);
    }
    if (uses(variant_, Modality::lidar)) {
        lidar_.emplace(geometry_.lidar, "lidar", rng);
    }
    const std::size_t features = head_input_features(variant_, geometry_);
    hidden_ = nn::Dense<T>(features, geometry_.hidden, "head.hidden", rng);
    output_ = nn::Dense<T>(geometry_.hidden, 1, "head.output", rng);
    if (variant_ == Variant::cgdual) {
        gate_camera_.emplace(geometry_.camera, "gate.camera", rng);
        gate_lidar_.emplace(geometry_.lidar, "gate.lidar", rng);
        gate_dense_.emplace(features, gate_count(geometry_), "gate.dense", rng);
    }
}

template <typename T>
void Network<T>::require(const Inputs<T>& in) const
{
    if (uses(variant_, Modality::camera) && !in.camera) {
        throw std::invalid_argument(std::string(to_string(variant_)) + " model requires a camera input");
    }
    if (uses(variant_, Modality::lidar) && !in.lidar) {
        throw std::invalid_argument(std::string(to_string(variant_)) + " model requires a lidar input");
    }
}

template <typename T>
Tensor<T> Network<T>::forward(Inputs<T> in)
{
    require(in);
    const Tensor<T>* first = in.camera && camera_ ? in.camera : in.lidar;
    batch_ = first->rank() == 4 ? first->dim(0) : 1;
    auto as_batch = [](const Tensor<T>& t) { return t.rank() == 4 ? t : nn::batched(t); };

    if (camera_) {
        camera_features_ = camera_->forward(as_batch(*in.camera));
    }
    if (lidar_) {
        lidar_features_ = lidar_->forward(as_batch(*in.lidar));
    }

    if (variant_ == Variant::cgdual) {
        if (gate_override_) {
            gates_ = Tensor<T>({batch_, gate_count(geometry_)}, *gate_override_);
        } else {
            Tensor<T> gc = nn::flatten(gate_camera_->forward(as_batch(*in.camera)));
            Tensor<T> gl = nn::flatten(gate_lidar_->forward(as_batch(*in.lidar)));
            gates_ = nn::sigmoid(gate_dense_->forward(nn::concat(gc, gl)));
        }
        std::tie(camera_out_, lidar_out_) = apply_gates(gates_, camera_features_, lidar_features_);
    } else {
        camera_out_ = camera_features_;
        lidar_out_ = lidar_features_;
    }

    Tensor<T> features;
    if (camera_ && lidar_) {
        features = nn::concat(nn::flatten(camera_out_), nn::flatten(lidar_out_));
    } else if (camera_) {
        features = nn::flatten(camera_out_);
    } else {
        features = nn::flatten(lidar_out_);
    }
    hidden_out_ = nn::relu(hidden_.forward(features));
    return output_.forward(hidden_out_);
}

template <typename T>
void Network<T>::backward(const Tensor<T>& upstream)
{
    if (upstream.size() != batch_) {
        throw nn::ShapeError("Network::backward: upstream " + nn::to_string(upstream.shape()) +
                             " does not match batch " + std::to_string(batch_));
    }
    Tensor<T> up = upstream.reshaped({batch_, 1});
    Tensor<T> d_features = hidden_.backward(nn::relu_backward(output_.backward(up), hidden_out_));

    Tensor<T> d_camera_out;
    Tensor<T> d_lidar_out;
    if (camera_ && lidar_) {
        const std::size_t widths[] = {camera_out_.size() / batch_, lidar_out_.size() / batch_};
        auto parts = nn::concat_backward<T>(d_features, widths);
        d_camera_out = parts[0].reshaped(camera_out_.shape());
        d_lidar_out = parts[1].reshaped(lidar_out_.shape());
    } else if (camera_) {
        d_camera_out = d_features.reshaped(camera_out_.shape());
    } else {
        d_lidar_out = d_features.reshaped(lidar_out_.shape());
    }

    if (variant_ == Variant::cgdual) {
        GateGrads<T> gg = apply_gates_backward(gates_, camera_features_, lidar_features_, d_camera_out, d_lidar_out);
        camera_->backward(gg.camera_features, false);
        lidar_->backward(gg.lidar_features, false);
        if (!gate_override_) {
            Tensor<T> d_concat = gate_dense_->backward(nn::sigmoid_backward(gg.gates, gates_));
            const std::size_t widths[] = {flattened_features(geometry_.camera), flattened_features(geometry_.lidar)};
            auto parts = nn::concat_backward<T>(d_concat, widths);
            gate_camera_->backward(parts[0].reshaped(camera_features_.shape()), false);
            gate_lidar_->backward(parts[1].reshaped(lidar_features_.shape()), false);
        }
        return;
    }
    if (camera_) {
        camera_->backward(d_camera_out, false);
    }
    if (lidar_) {
        lidar_->backward(d_lidar_out, false);
    }
}

template <typename T>
T Network<T>::predict(const Tensor<T>* camera, const Tensor<T>* lidar)
{
    return forward({camera, lidar})[0];
}

template <typename T>
std::vector<nn::Parameter<T>*> Network<T>::parameters()
{
    std::vector<nn::Parameter<T>*> out;
    if (camera_) {
        camera_->collect(out);
    }
    if (lidar_) {
        lidar_->collect(out);
    }
    out.push_back(&hidden_.weight());
    out.push_back(&hidden_.bias());
    out.push_back(&output_.weight());
    out.push_back(&output_.bias());
    if (variant_ == Variant::cgdual) {
        gate_camera_->collect(out);
        gate_lidar_->collect(out);
        out.push_back(&gate_dense_->weight());
        out.push_back(&gate_dense_->bias());
    }
    return out;
}

template <typename T>
std::vector<const nn::Parameter<T>*> Network<T>::parameters() const
{
    auto mutable_params = const_cast<Network*>(this)->parameters();
    return {mutable_params.begin(), mutable_params.end()};
}

template <typename T>
void Network<T>::zero_grad()
{
    for (nn::Parameter<T>* p : parameters()) {
        p->zero_grad();
    }
}

template <typename T>
std::size_t Network<T>::parameter_count() const
{
    std::size_t n = 0;
    for (const nn::Parameter<T>* p : parameters()) {
        n += p->value.size();
    }
    return n;
}

template <typename T>
const ConvBlock<T>* Network<T>::steering_block(Modality m) const
{
    const auto& b = m == Modality::camera ? camera_ : lidar_;
    return b ? &*b : nullptr;
}

template <typename T>
const Tensor<T>* Network<T>::block_output(Modality m) const
{
    if (!uses(variant_, m)) {
        return nullptr;
    }
    return m == Modality::camera ? &camera_out_ : &lidar_out_;
}

template std::pair<Tensor<float>, Tensor<float>> apply_gates(const Tensor<float>&, const Tensor<float>&,
                                                             const Tensor<float>&);
template std::pair<Tensor<double>, Tensor<double>> apply_gates(const Tensor<double>&, const Tensor<double>&,
                                                               const Tensor<double>&);
template GateGrads<float> apply_gates_backward(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                               const Tensor<float>&, const Tensor<float>&);
template GateGrads<double> apply_gates_backward(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                                const Tensor<double>&, const Tensor<double>&);
template class ConvBlock<float>;
template class ConvBlock<double>;
template class Network<float>;
template class Network<double>;

} // namespace steerfuse::arch
