#include "csilab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace csilab::ad {

namespace {

int product(std::span<const int> dims) {
    return std::accumulate(dims.begin(), dims.end(), 1, std::multiplies<>());
}

std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
    if (a.values().rows() != b.values().rows() || a.values().cols() != b.values().cols()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
}

}  // namespace

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    if (shape_.empty()) throw std::invalid_argument("Tensor: empty shape");
    values_ = Matrix::Zero(shape_[0], row_size());
}

Tensor::Tensor(std::vector<int> shape, Matrix values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (shape_.empty() || values_.rows() != shape_[0] || values_.cols() != row_size()) {
        throw std::invalid_argument("Tensor: values do not match shape " + shape_str(shape_));
    }
}

Tensor Tensor::from_matrix(Matrix m) {
    std::vector<int> shape{static_cast<int>(m.rows()), static_cast<int>(m.cols())};
    return Tensor(std::move(shape), std::move(m));
}

Tensor Tensor::scalar(double v) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return Tensor({1, 1}, std::move(m));
}

int Tensor::row_size() const {
    return shape_.size() <= 1 ? 1 : product(std::span<const int>(shape_).subspan(1));
}

double Tensor::item() const {
    if (values_.size() != 1) throw std::invalid_argument("Tensor::item on non-scalar " + shape_str(shape_));
    return values_(0, 0);
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
    if (product(shape) != static_cast<int>(values_.size())) {
        throw std::invalid_argument("reshape: element count mismatch " + shape_str(shape_) + " -> " + shape_str(shape));
    }
    const int r = shape[0];
    const int c = static_cast<int>(values_.size()) / std::max(r, 1);
    Matrix m = Eigen::Map<const Matrix>(values_.data(), r, c);
    return Tensor(std::move(shape), std::move(m));
}

// ---------------------------------------------------------------- ParameterSet

Parameter& ParameterSet::add(std::string name, std::vector<int> shape) {
    if (find(name)) throw std::invalid_argument("duplicate parameter " + name);
    auto p = std::make_unique<Parameter>();
    p->name = std::move(name);
    p->value = Tensor(shape);
    p->grad = Tensor(std::move(shape));
    params_.push_back(std::move(p));
    return *params_.back();
}

Parameter* ParameterSet::find(const std::string& name) {
    for (auto& p : params_)
        if (p->name == name) return p.get();
    return nullptr;
}

const Parameter* ParameterSet::find(const std::string& name) const {
    for (const auto& p : params_)
        if (p->name == name) return p.get();
    return nullptr;
}

Parameter& ParameterSet::at(const std::string& name) {
    if (auto* p = find(name)) return *p;
    throw std::out_of_range("no parameter named " + name);
}

void ParameterSet::zero_grad() {
    for (auto& p : params_) p->grad.values().setZero();
}

void ParameterSet::set_trainable(bool trainable) {
    for (auto& p : params_) p->trainable = trainable;
}

std::size_t ParameterSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.numel();
    return n;
}

// ---------------------------------------------------------------- Graph

Var Graph::push(Tensor value, bool requires_grad, std::function<void(Graph&, const Matrix&)> bw) {
    if (consumed_) throw StaleTapeError("graph already consumed by backward()");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

const Matrix& Graph::grad(Var v) const {
    const auto& n = nodes_.at(v.id);
    if (!n.has_grad) throw std::logic_error("no gradient recorded for node");
    return n.grad;
}

void Graph::accumulate(Var v, const Matrix& g) {
    auto& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
        n.grad = g;
        n.has_grad = true;
    } else {
        n.grad += g;
    }
}

Matrix Graph::frozen(const Matrix& current) {
    if (!replay_ || mode_ == ReplayMode::Off) return current;
    if (mode_ == ReplayMode::Record) {
        replay_->frozen.push_back(current);
        return current;
    }
    if (frozen_pos_ >= replay_->frozen.size()) throw std::logic_error("replay: more stop-gradients than recorded");
    const Matrix& m = replay_->frozen[frozen_pos_++];
    if (m.rows() != current.rows() || m.cols() != current.cols()) {
        throw std::logic_error("replay: stop-gradient shape changed between passes");
    }
    return m;
}

std::vector<int> Graph::choice(std::vector<int> fresh) {
    if (!replay_ || mode_ == ReplayMode::Off) return fresh;
    if (mode_ == ReplayMode::Record) {
        replay_->choices.push_back(fresh);
        return fresh;
    }
    if (choice_pos_ >= replay_->choices.size()) throw std::logic_error("replay: more choices than recorded");
    return replay_->choices[choice_pos_++];
}

Var Graph::input(Tensor t) { return push(std::move(t), false); }

Var Graph::param(Parameter& p) {
    Var v = push(p.value, p.trainable);
    nodes_[v.id].param = &p;
    nodes_[v.id].param_version = p.version;
    return v;
}

Var Graph::dense(Var x, Var w, Var b) {
    const Matrix& xv = value(x).values();
    const Matrix& wv = value(w).values();
    const Matrix& bv = value(b).values();
    if (xv.cols() != wv.rows() || bv.cols() != wv.cols() || bv.rows() != 1) {
        throw std::invalid_argument("dense: input " + shape_str(value(x).shape()) + " weight " +
                                    shape_str(value(w).shape()) + " bias " + shape_str(value(b).shape()));
    }
    Matrix y = xv * wv;
    y.rowwise() += bv.row(0);
    const bool rg = needs(x) || needs(w) || needs(b);
    std::vector<int> shape{static_cast<int>(y.rows()), static_cast<int>(y.cols())};
    return push(Tensor(std::move(shape), std::move(y)), rg,
                [x, w, b](Graph& g, const Matrix& dy) {
                    if (g.needs(x)) g.accumulate(x, dy * g.value(w).values().transpose());
                    if (g.needs(w)) g.accumulate(w, g.value(x).values().transpose() * dy);
                    if (g.needs(b)) g.accumulate(b, dy.colwise().sum());
                });
}

Var Graph::conv3x3(Var x, Var w, Var b, const ConvGeometry& geo) {
    const Matrix& xv = value(x).values();
    const Matrix& wv = value(w).values();
    const Matrix& bv = value(b).values();
    const int hw = geo.height * geo.width;
    if (xv.cols() != geo.in_channels * hw || wv.rows() != geo.out_channels || wv.cols() != geo.in_channels * 9 ||
        bv.rows() != 1 || bv.cols() != geo.out_channels) {
        throw std::invalid_argument("conv3x3: shape mismatch for input " + shape_str(value(x).shape()));
    }
    const int batch = static_cast<int>(xv.rows());

    // im2col: rows (ci, ky, kx), cols (sample, pixel).
    auto cols = std::make_shared<Matrix>(Matrix::Zero(geo.in_channels * 9, static_cast<Eigen::Index>(batch) * hw));
    for (int s = 0; s < batch; ++s) {
        for (int ci = 0; ci < geo.in_channels; ++ci) {
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    const int row = ci * 9 + ky * 3 + kx;
                    for (int h = 0; h < geo.height; ++h) {
                        const int sh = h + ky - 1;
                        if (sh < 0 || sh >= geo.height) continue;
                        for (int wi = 0; wi < geo.width; ++wi) {
                            const int sw = wi + kx - 1;
                            if (sw < 0 || sw >= geo.width) continue;
                            (*cols)(row, static_cast<Eigen::Index>(s) * hw + h * geo.width + wi) =
                                xv(s, ci * hw + sh * geo.width + sw);
                        }
                    }
                }
            }
        }
    }
    const Matrix out = wv * (*cols);  // out_channels x (batch * hw)
    Matrix y(batch, geo.out_channels * hw);
    for (int s = 0; s < batch; ++s)
        for (int co = 0; co < geo.out_channels; ++co)
            y.block(s, static_cast<Eigen::Index>(co) * hw, 1, hw) =
                out.block(co, static_cast<Eigen::Index>(s) * hw, 1, hw).array() + bv(0, co);

    const bool rg = needs(x) || needs(w) || needs(b);
    return push(Tensor({batch, geo.out_channels * hw}, std::move(y)), rg,
                [x, w, b, geo, cols, batch, hw](Graph& g, const Matrix& dy) {
                    Matrix dout(geo.out_channels, static_cast<Eigen::Index>(batch) * hw);
                    for (int s = 0; s < batch; ++s)
                        for (int co = 0; co < geo.out_channels; ++co)
                            dout.block(co, static_cast<Eigen::Index>(s) * hw, 1, hw) =
                                dy.block(s, static_cast<Eigen::Index>(co) * hw, 1, hw);
                    if (g.needs(w)) g.accumulate(w, dout * cols->transpose());
                    if (g.needs(b)) g.accumulate(b, dout.rowwise().sum().transpose());
                    if (!g.needs(x)) return;
                    const Matrix dcols = g.value(w).values().transpose() * dout;
                    Matrix dx = Matrix::Zero(batch, geo.in_channels * hw);
                    for (int s = 0; s < batch; ++s)
                        for (int ci = 0; ci < geo.in_channels; ++ci)
                            for (int ky = 0; ky < 3; ++ky)
                                for (int kx = 0; kx < 3; ++kx) {
                                    const int row = ci * 9 + ky * 3 + kx;
                                    for (int h = 0; h < geo.height; ++h) {
                                        const int sh = h + ky - 1;
                                        if (sh < 0 || sh >= geo.height) continue;
                                        for (int wi = 0; wi < geo.width; ++wi) {
                                            const int sw = wi + kx - 1;
                                            if (sw < 0 || sw >= geo.width) continue;
                                            dx(s, ci * hw + sh * geo.width + sw) +=
                                                dcols(row, static_cast<Eigen::Index>(s) * hw + h * geo.width + wi);
                                        }
                                    }
                                }
                    g.accumulate(x, dx);
                });
}

Var Graph::leaky_relu(Var x, double slope) {
    const Tensor& xt = value(x);
    Matrix y = xt.values().unaryExpr([slope](double v) { return v > 0 ? v : slope * v; });
    return push(Tensor(xt.shape(), std::move(y)), needs(x), [x, slope](Graph& g, const Matrix& dy) {
        const Matrix& xv = g.value(x).values();
        g.accumulate(x, dy.binaryExpr(xv, [slope](double d, double v) { return v > 0 ? d : slope * d; }));
    });
}

Var Graph::add(Var a, Var b) {
    require_same(value(a), value(b), "add");
    Matrix y = value(a).values() + value(b).values();
    return push(Tensor(value(a).shape(), std::move(y)), needs(a) || needs(b), [a, b](Graph& g, const Matrix& dy) {
        g.accumulate(a, dy);
        g.accumulate(b, dy);
    });
}

Var Graph::sub(Var a, Var b) {
    require_same(value(a), value(b), "sub");
    Matrix y = value(a).values() - value(b).values();
    return push(Tensor(value(a).shape(), std::move(y)), needs(a) || needs(b), [a, b](Graph& g, const Matrix& dy) {
        g.accumulate(a, dy);
        if (g.needs(b)) g.accumulate(b, -dy);
    });
}

Var Graph::scale(Var a, double s) {
    Matrix y = s * value(a).values();
    return push(Tensor(value(a).shape(), std::move(y)), needs(a),
                [a, s](Graph& g, const Matrix& dy) { g.accumulate(a, s * dy); });
}

Var Graph::reshape(Var x, std::vector<int> shape) {
    Tensor y = value(x).reshaped(std::move(shape));
    return push(std::move(y), needs(x), [x](Graph& g, const Matrix& dy) {
        const Matrix& xv = g.value(x).values();
        g.accumulate(x, Eigen::Map<const Matrix>(dy.data(), xv.rows(), xv.cols()));
    });
}

Var Graph::stop_gradient(Var x) {
    const Tensor& xt = value(x);
    return push(Tensor(xt.shape(), frozen(xt.values())), false);
}

Var Graph::straight_through(Var a, Var b) {
    require_same(value(a), value(b), "straight_through");
    const Matrix offset = frozen(value(b).values() - value(a).values());
    Matrix y = value(a).values() + offset;
    return push(Tensor(value(a).shape(), std::move(y)), needs(a),
                [a](Graph& g, const Matrix& dy) { g.accumulate(a, dy); });
}

Var Graph::gather_rows(Var table, std::span<const int> indices, int groups) {
    const Matrix& tv = value(table).values();
    if (groups < 1 || indices.size() % groups != 0) throw std::invalid_argument("gather_rows: bad group count");
    const int batch = static_cast<int>(indices.size()) / groups;
    const int dim = static_cast<int>(tv.cols());
    Matrix y(batch, static_cast<Eigen::Index>(groups) * dim);
    for (int r = 0; r < batch; ++r) {
        for (int n = 0; n < groups; ++n) {
            const int idx = indices[static_cast<std::size_t>(r) * groups + n];
            if (idx < 0 || idx >= tv.rows()) throw std::out_of_range("gather_rows: index out of range");
            y.block(r, static_cast<Eigen::Index>(n) * dim, 1, dim) = tv.row(idx);
        }
    }
    std::vector<int> idx_copy(indices.begin(), indices.end());
    return push(Tensor({batch, groups * dim}, std::move(y)), needs(table),
                [table, idx = std::move(idx_copy), groups, dim, batch](Graph& g, const Matrix& dy) {
                    const Matrix& tv = g.value(table).values();
                    Matrix dt = Matrix::Zero(tv.rows(), tv.cols());
                    for (int r = 0; r < batch; ++r)
                        for (int n = 0; n < groups; ++n)
                            dt.row(idx[static_cast<std::size_t>(r) * groups + n]) +=
                                dy.block(r, static_cast<Eigen::Index>(n) * dim, 1, dim);
                    g.accumulate(table, dt);
                });
}

Var Graph::mse(Var a, Var b) {
    require_same(value(a), value(b), "mse");
    const double n = static_cast<double>(value(a).numel());
    const double loss = (value(a).values() - value(b).values()).squaredNorm() / n;
    return push(Tensor::scalar(loss), needs(a) || needs(b), [a, b, n](Graph& g, const Matrix& dy) {
        const Matrix d = (2.0 * dy(0, 0) / n) * (g.value(a).values() - g.value(b).values());
        if (g.needs(a)) g.accumulate(a, d);
        if (g.needs(b)) g.accumulate(b, -d);
    });
}

Var Graph::squared_error(Var a, Var b) {
    require_same(value(a), value(b), "squared_error");
    const double rows = std::max(1, value(a).rows());
    const double loss = (value(a).values() - value(b).values()).squaredNorm() / rows;
    return push(Tensor::scalar(loss), needs(a) || needs(b), [a, b, rows](Graph& g, const Matrix& dy) {
        const Matrix d = (2.0 * dy(0, 0) / rows) * (g.value(a).values() - g.value(b).values());
        if (g.needs(a)) g.accumulate(a, d);
        if (g.needs(b)) g.accumulate(b, -d);
    });
}

Var Graph::angular_distortion(Var a, Var b) {
    require_same(value(a), value(b), "angular_distortion");
    const Matrix& av = value(a).values();
    const Matrix& bv = value(b).values();
    const double rows = std::max(1, value(a).rows());
    const double loss =
        ((av.array().cos() - bv.array().cos()).square() + (av.array().sin() - bv.array().sin()).square()).sum() / rows;
    return push(Tensor::scalar(loss), needs(a) || needs(b), [a, b, rows](Graph& g, const Matrix& dy) {
        // d/da [(cos a - cos b)^2 + (sin a - sin b)^2] = 2 sin(a - b)
        const Matrix d =
            ((2.0 * dy(0, 0) / rows) * (g.value(a).values() - g.value(b).values()).array().sin()).matrix();
        if (g.needs(a)) g.accumulate(a, d);
        if (g.needs(b)) g.accumulate(b, -d);
    });
}

void Graph::backward(Var out) {
    if (value(out).numel() != 1) throw std::invalid_argument("backward: output is not scalar; pass a seed gradient");
    backward(out, Matrix::Ones(1, 1));
}

void Graph::backward(Var out, const Matrix& seed) {
    if (consumed_) throw StaleTapeError("backward: tape already consumed");
    for (const auto& n : nodes_) {
        if (n.param && n.param->version != n.param_version) {
            throw StaleTapeError("backward: parameter '" + n.param->name + "' changed since the forward pass");
        }
    }
    const auto& ov = value(out).values();
    if (seed.rows() != ov.rows() || seed.cols() != ov.cols()) throw std::invalid_argument("backward: seed shape");
    consumed_ = true;
    accumulate(out, seed);
    for (int i = out.id; i >= 0; --i) {
        Node& n = nodes_[i];
        if (!n.has_grad) continue;
        if (n.backward) n.backward(*this, n.grad);
        if (n.param && n.param->trainable) n.param->grad.values() += n.grad;
    }
}

// ---------------------------------------------------------------- Adam

void adam_step(ParameterSet& params, AdamState& state) {
    if (state.m.size() != params.size()) {
        state.m.clear();
        state.v.clear();
        for (const auto& p : params) {
            state.m.push_back(Matrix::Zero(p->value.values().rows(), p->value.values().cols()));
            state.v.push_back(Matrix::Zero(p->value.values().rows(), p->value.values().cols()));
        }
    }
    ++state.step;
    const auto& c = state.config;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    std::size_t i = 0;
    for (auto& p : params) {
        auto& m = state.m[i];
        auto& v = state.v[i];
        ++i;
        if (!p->trainable) continue;
        const Matrix& g = p->grad.values();
        m = c.beta1 * m + (1.0 - c.beta1) * g;
        v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseProduct(g);
        p->value.values().array() -= c.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + c.eps);
        ++p->version;
    }
}

// ---------------------------------------------------------------- grad check

double grad_check(const LossBuilder& build, ParameterSet& params, const GradCheckOptions& opt) {
    Replay replay;
    params.zero_grad();
    {
        Graph g(&replay, Graph::ReplayMode::Record);
        Var loss = build(g);
        g.backward(loss);
    }
    auto evaluate = [&] {
        Graph g(&replay, Graph::ReplayMode::Replay);
        return g.value(build(g)).item();
    };

    std::mt19937_64 rng(opt.seed);
    double worst = 0.0;
    for (auto& p : params) {
        if (!p->trainable) continue;
        const int n = static_cast<int>(p->value.numel());
        std::vector<int> coords(n);
        std::iota(coords.begin(), coords.end(), 0);
        if (opt.coords_per_param > 0 && opt.coords_per_param < n) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(opt.coords_per_param);
        }
        double* values = p->value.values().data();
        const double* grads = p->grad.values().data();
        for (int c : coords) {
            const double orig = values[c];
            values[c] = orig + opt.eps;
            const double up = evaluate();
            values[c] = orig - opt.eps;
            const double down = evaluate();
            values[c] = orig;
            const double numeric = (up - down) / (2 * opt.eps);
            const double analytic = grads[c];
            const double err = std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), opt.floor);
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace csilab::ad
