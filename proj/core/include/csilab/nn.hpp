#pragma once

#include <random>
#include <string>
#include <vector>

#include "csilab/autodiff.hpp"

namespace csilab::nn {

constexpr double kLeakySlope = 0.2;

/// Affine layer y = x W + b; W is in x out.
struct Dense {
    ad::Parameter* weight = nullptr;
    ad::Parameter* bias = nullptr;

    ad::Var forward(ad::Graph& g, ad::Var x) const;
    int in_features() const { return weight->value.shape()[0]; }
    int out_features() const { return weight->value.shape()[1]; }
};

/// Dense stack with leaky-ReLU between layers and a linear output.
class Mlp {
   public:
    Mlp() = default;
    /// Registers `prefix`.0.weight, `prefix`.0.bias, ... in `params`.
    Mlp(ad::ParameterSet& params, const std::string& prefix, const std::vector<int>& sizes);

    /// Rebinds to parameters already present in `params` (after loading).
    static Mlp bind(ad::ParameterSet& params, const std::string& prefix, const std::vector<int>& sizes);

    ad::Var forward(ad::Graph& g, ad::Var x) const;
    /// Tape-free evaluation, identical arithmetic to forward().
    ad::Matrix infer(const ad::Matrix& x) const;
    void init_uniform(std::mt19937_64& rng);
    void zero_output();

    const std::vector<int>& sizes() const { return sizes_; }
    int in_features() const { return sizes_.front(); }
    int out_features() const { return sizes_.back(); }

   private:
    std::vector<Dense> layers_;
    std::vector<int> sizes_;
};

struct Conv3x3 {
    ad::Parameter* weight = nullptr;  // out x (in * 9)
    ad::Parameter* bias = nullptr;    // 1 x out
    ad::ConvGeometry geometry{};

    ad::Var forward(ad::Graph& g, ad::Var x) const;
};

/// 3x3 convolutions over a fixed height x width grid with leaky-ReLU
/// between layers and a linear output layer.
class ConvStack {
   public:
    ConvStack() = default;
    ConvStack(ad::ParameterSet& params, const std::string& prefix, const std::vector<int>& channels, int height,
              int width);
    static ConvStack bind(ad::ParameterSet& params, const std::string& prefix, const std::vector<int>& channels,
                          int height, int width);

    ad::Var forward(ad::Graph& g, ad::Var x) const;
    ad::Matrix infer(const ad::Matrix& x) const;
    void init_uniform(std::mt19937_64& rng);
    void zero_output();

    const std::vector<int>& channels() const { return channels_; }

   private:
    std::vector<Conv3x3> layers_;
    std::vector<int> channels_;
};

/// Glorot-uniform weights, zero bias.
void glorot_uniform(ad::Parameter& w, int fan_in, int fan_out, std::mt19937_64& rng);

}  // namespace csilab::nn
