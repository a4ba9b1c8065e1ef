#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace csilab::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense tensor. The leading dimension is the batch; values are stored as a
/// row-major matrix of shape[0] x prod(shape[1:]).
class Tensor {
   public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, Matrix values);

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor from_matrix(Matrix m);
    static Tensor scalar(double v);

    const std::vector<int>& shape() const { return shape_; }
    int rows() const { return shape_.empty() ? 0 : shape_[0]; }
    int row_size() const;
    std::size_t numel() const { return static_cast<std::size_t>(values_.size()); }

    Matrix& values() { return values_; }
    const Matrix& values() const { return values_; }
    double item() const;

    Tensor reshaped(std::vector<int> shape) const;

   private:
    std::vector<int> shape_;
    Matrix values_;
};

class StaleTapeError : public std::logic_error {
   public:
    using std::logic_error::logic_error;
};

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;
    std::uint64_t version = 0;  // bumped on every in-place update
};

/// Owns parameters with stable addresses.
class ParameterSet {
   public:
    Parameter& add(std::string name, std::vector<int> shape);
    Parameter* find(const std::string& name);
    const Parameter* find(const std::string& name) const;
    Parameter& at(const std::string& name);

    void zero_grad();
    void set_trainable(bool trainable);
    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const;

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

   private:
    std::vector<std::unique_ptr<Parameter>> params_;
};

/// Values frozen by stop_gradient and discrete choices (e.g. argmin indices)
/// captured in one pass and replayed in later passes. Finite differences run
/// in replay mode so sg(.) behaves as a constant, as its definition requires.
struct Replay {
    std::vector<Matrix> frozen;
    std::vector<std::vector<int>> choices;
};

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

struct ConvGeometry {
    int in_channels;
    int out_channels;
    int height;
    int width;
};

/// Recording tape. Each op evaluates eagerly and appends a node; backward()
/// walks nodes in reverse. A Graph is single-use: build, backward, discard.
class Graph {
   public:
    enum class ReplayMode { Off, Record, Replay };

    Graph() = default;
    Graph(Replay* replay, ReplayMode mode) : replay_(replay), mode_(mode) {}

    Var input(Tensor t);
    Var param(Parameter& p);

    Var dense(Var x, Var w, Var b);
    Var conv3x3(Var x, Var w, Var b, const ConvGeometry& g);
    Var leaky_relu(Var x, double slope = 0.2);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var scale(Var a, double s);
    Var reshape(Var x, std::vector<int> shape);
    Var stop_gradient(Var x);
    /// Forward value b, gradient passed to a unchanged: a + sg(b - a).
    Var straight_through(Var a, Var b);
    /// out[r, n*D:(n+1)*D] = table[indices[r*N + n], :].
    Var gather_rows(Var table, std::span<const int> indices, int groups);

    /// Scalar reductions; all average over the batch (leading) dimension.
    Var mse(Var a, Var b);                  // mean over every element
    Var squared_error(Var a, Var b);        // per-row sum, batch mean
    Var angular_distortion(Var a, Var b);   // per-row sum of |e^{ja}-e^{jb}|^2, batch mean

    /// Discrete decision hook: records in Record mode, returns the recorded
    /// decision in Replay mode, otherwise returns `fresh` as-is.
    std::vector<int> choice(std::vector<int> fresh);

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
    const Matrix& grad(Var v) const;
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    /// Accumulates d(out)/d(param) into every trainable Parameter::grad.
    /// `out` must be scalar unless an explicit seed gradient is given.
    void backward(Var out);
    void backward(Var out, const Matrix& seed);

   private:
    struct Node {
        Tensor value;
        Matrix grad;
        bool requires_grad = false;
        bool has_grad = false;
        Parameter* param = nullptr;
        std::uint64_t param_version = 0;
        std::function<void(Graph&, const Matrix&)> backward;
    };

    Var push(Tensor value, bool requires_grad, std::function<void(Graph&, const Matrix&)> bw = {});
    void accumulate(Var v, const Matrix& g);
    bool needs(Var v) const { return nodes_[v.id].requires_grad; }
    Matrix frozen(const Matrix& current);

    std::vector<Node> nodes_;
    Replay* replay_ = nullptr;
    ReplayMode mode_ = ReplayMode::Off;
    std::size_t frozen_pos_ = 0;
    std::size_t choice_pos_ = 0;
    bool consumed_ = false;
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    AdamConfig config;
    std::uint64_t step = 0;
    std::vector<Matrix> m;
    std::vector<Matrix> v;
};

/// Bias-corrected Adam update over every trainable parameter in `params`.
void adam_step(ParameterSet& params, AdamState& state);

/// Builds a scalar loss on a fresh graph (which may be in replay mode).
using LossBuilder = std::function<Var(Graph&)>;

struct GradCheckOptions {
    double eps = 1e-5;
    int coords_per_param = 16;  // sampled coordinates; <= 0 checks all
    std::uint64_t seed = 7;
    double floor = 1e-6;        // denominator floor for near-zero gradients
};

/// Largest |analytic - numeric| / max(|analytic| + |numeric|, floor) over
/// sampled coordinates of every trainable parameter.
double grad_check(const LossBuilder& build, ParameterSet& params, const GradCheckOptions& opt = {});

}  // namespace csilab::ad
