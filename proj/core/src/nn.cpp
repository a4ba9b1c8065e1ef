#include "csilab/nn.hpp"

#include <cmath>

namespace csilab::nn {

void glorot_uniform(ad::Parameter& w, int fan_in, int fan_out, std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Eigen::Index i = 0; i < w.value.values().size(); ++i) w.value.values().data()[i] = dist(rng);
    ++w.version;
}

ad::Var Dense::forward(ad::Graph& g, ad::Var x) const { return g.dense(x, g.param(*weight), g.param(*bias)); }

Mlp::Mlp(ad::ParameterSet& params, const std::string& prefix, const std::vector<int>& sizes) : sizes_(sizes) {
    if (sizes.size() < 2) throw std::invalid_argument("Mlp: need at least input and output sizes");
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
        const std::string base = prefix + "." + std::to_string(i);
        Dense d;
        d.weight = &params.add(base + ".weight", {sizes[i], sizes[i + 1]});
        d.bias = &params.add(base + ".bias", {1, sizes[i + 1]});
        layers_.push_back(d);
    }
}

Mlp Mlp::bind(ad::ParameterSet& params, const std::string& prefix, const std::vector<int>& sizes) {
    Mlp m;
    m.sizes_ = sizes;
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
        const std::string base = prefix + "." + std::to_string(i);
        Dense d;
        d.weight = &params.at(base + ".weight");
        d.bias = &params.at(base + ".bias");
        if (d.in_features() != sizes[i] || d.out_features() != sizes[i + 1]) {
            throw std::invalid_argument("Mlp::bind: layer " + base + " has unexpected shape");
        }
        m.layers_.push_back(d);
    }
    return m;
}

ad::Var Mlp::forward(ad::Graph& g, ad::Var x) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        x = layers_[i].forward(g, x);
        if (i + 1 < layers_.size()) x = g.leaky_relu(x, kLeakySlope);
    }
    return x;
}

ad::Matrix Mlp::infer(const ad::Matrix& x) const {
    ad::Matrix h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        ad::Matrix y = h * layers_[i].weight->value.values();
        y.rowwise() += layers_[i].bias->value.values().row(0);
        if (i + 1 < layers_.size()) y = y.unaryExpr([](double v) { return v > 0 ? v : kLeakySlope * v; });
        h = std::move(y);
    }
    return h;
}

void Mlp::init_uniform(std::mt19937_64& rng) {
    for (auto& l : layers_) {
        glorot_uniform(*l.weight, l.in_features(), l.out_features(), rng);
        l.bias->value.values().setZero();
    }
}

void Mlp::zero_output() {
    layers_.back().weight->value.values().setZero();
    layers_.back().bias->value.values().setZero();
}

ad::Var Conv3x3::forward(ad::Graph& g, ad::Var x) const {
    return g.conv3x3(x, g.param(*weight), g.param(*bias), geometry);
}

ConvStack::ConvStack(ad::ParameterSet& params, const std::string& prefix, const std::vector<int>& channels,
                     int height, int width)
    : channels_(channels) {
    if (channels.size() < 2) throw std::invalid_argument("ConvStack: need at least two channel counts");
    for (std::size_t i = 0; i + 1 < channels.size(); ++i) {
        const std::string base = prefix + "." + std::to_string(i);
        Conv3x3 c;
        c.weight = &params.add(base + ".weight", {channels[i + 1], channels[i] * 9});
        c.bias = &params.add(base + ".bias", {1, channels[i + 1]});
        c.geometry = {channels[i], channels[i + 1], height, width};
        layers_.push_back(c);
    }
}

ConvStack ConvStack::bind(ad::ParameterSet& params, const std::string& prefix, const std::vector<int>& channels,
                          int height, int width) {
    ConvStack s;
    s.channels_ = channels;
    for (std::size_t i = 0; i + 1 < channels.size(); ++i) {
        const std::string base = prefix + "." + std::to_string(i);
        Conv3x3 c;
        c.weight = &params.at(base + ".weight");
        c.bias = &params.at(base + ".bias");
        c.geometry = {channels[i], channels[i + 1], height, width};
        if (c.weight->value.shape() != std::vector<int>{channels[i + 1], channels[i] * 9}) {
            throw std::invalid_argument("ConvStack::bind: layer " + base + " has unexpected shape");
        }
        s.layers_.push_back(c);
    }
    return s;
}

ad::Var ConvStack::forward(ad::Graph& g, ad::Var x) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        x = layers_[i].forward(g, x);
        if (i + 1 < layers_.size()) x = g.leaky_relu(x, kLeakySlope);
    }
    return x;
}

ad::Matrix ConvStack::infer(const ad::Matrix& x) const {
    ad::Graph g;
    ad::Var v = g.input(ad::Tensor::from_matrix(x));
    return g.value(forward(g, v)).values();
}

void ConvStack::init_uniform(std::mt19937_64& rng) {
    for (auto& l : layers_) {
        glorot_uniform(*l.weight, l.geometry.in_channels * 9, l.geometry.out_channels * 9, rng);
        l.bias->value.values().setZero();
    }
}

void ConvStack::zero_output() {
    layers_.back().weight->value.values().setZero();
    layers_.back().bias->value.values().setZero();
}

}  // namespace csilab::nn
