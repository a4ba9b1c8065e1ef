#include "csilab/refine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace csilab::refine {

namespace {

Matrix frame_row(const AngleSet& a) { return Matrix(a.flatten().transpose()); }

AngleSet frame_from(const Matrix& m, Eigen::Index r, int n_a, int n_c) {
    const Eigen::VectorXd f = m.row(r).transpose();
    return AngleSet::unflatten(f, n_a, n_c);
}

}  // namespace

void RefinerGeometry::validate() const {
    if (n_a < 1 || n_c < 1) throw std::invalid_argument("refiner: grid must be non-empty");
    if (window < 1) throw std::invalid_argument("refiner: window must be at least 1");
    for (int h : hidden)
        if (h < 1) throw std::invalid_argument("refiner: hidden channel counts must be positive");
}

void to_json(nlohmann::json& j, const RefinerGeometry& g) {
    j = {{"n_a", g.n_a}, {"n_c", g.n_c}, {"window", g.window}, {"hidden", g.hidden}};
}

void from_json(const nlohmann::json& j, RefinerGeometry& g) {
    RefinerGeometry d;
    g.n_a = j.value("n_a", d.n_a);
    g.n_c = j.value("n_c", d.n_c);
    g.window = j.value("window", d.window);
    g.hidden = j.value("hidden", d.hidden);
}

RefinerModel::RefinerModel(RefinerGeometry geometry) : geo_(std::move(geometry)) {
    geo_.validate();
    net_ = nn::ConvStack(params_, "refiner", channels(), geo_.n_a, geo_.n_c);
}

std::vector<int> RefinerModel::channels() const {
    std::vector<int> c{2 * geo_.window};
    c.insert(c.end(), geo_.hidden.begin(), geo_.hidden.end());
    c.push_back(2);
    return c;
}

void RefinerModel::init(std::mt19937_64& rng) {
    net_.init_uniform(rng);
    net_.zero_output();
}

void RefinerModel::rebind() { net_ = nn::ConvStack::bind(params_, "refiner", channels(), geo_.n_a, geo_.n_c); }

RefinerModel RefinerModel::clone() const {
    RefinerModel m(geo_);
    for (const auto& p : params_) {
        auto& q = m.params_.at(p->name);
        q.value = p->value;
        q.trainable = p->trainable;
    }
    return m;
}

ad::Var RefinerModel::forward(ad::Graph& g, const Matrix& windows) const {
    const int f = geo_.frame_size();
    if (windows.cols() != static_cast<Eigen::Index>(f) * geo_.window)
        throw std::invalid_argument("refiner: window rows must hold T frames");
    ad::Var x = g.input(ad::Tensor::from_matrix(windows));
    ad::Var current = g.input(ad::Tensor::from_matrix(windows.rightCols(f)));
    return g.add(net_.forward(g, x), current);
}

Matrix RefinerModel::infer(const Matrix& windows) const {
    ad::Graph g;
    return g.value(forward(g, windows)).values();
}

void RefinerModel::round_to_storage() {
    for (auto& p : params_) {
        auto& v = p->value.values();
        for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<float>(v.data()[i]);
        ++p->version;
    }
}

AngleSet refine(const RefinerModel& model, std::span<const AngleSet> window) {
    const auto& geo = model.geometry();
    if (static_cast<int>(window.size()) != geo.window) throw std::invalid_argument("refine: window must hold exactly T frames");
    const int f = geo.frame_size();
    Matrix row(1, static_cast<Eigen::Index>(f) * geo.window);
    for (int k = 0; k < geo.window; ++k) {
        if (window[k].n_a() != geo.n_a || window[k].n_c() != geo.n_c)
            throw std::invalid_argument("refine: frame shape mismatch");
        row.middleCols(static_cast<Eigen::Index>(k) * f, f) = frame_row(window[k]);
    }
    return frame_from(model.infer(row), 0, geo.n_a, geo.n_c);
}

std::vector<WindowSlot> window_slots(int t, int window) {
    if (t < window) throw std::invalid_argument("window_slots: steps before T are not refined");
    std::vector<WindowSlot> slots;
    for (int j = t - window + 1; j <= t; ++j) slots.push_back({j, j < t && j >= window});
    return slots;
}

namespace {

/// Window rows for every refined step of one sequence; `refined` may be
/// empty (raw windows only).
Matrix sequence_windows(const AngleSequence& hat, const AngleSequence& refined, int window, int f) {
    const int len = static_cast<int>(hat.size());
    const int n = std::max(0, len - window);
    Matrix w(n, static_cast<Eigen::Index>(f) * window);
    for (int t = window; t < len; ++t) {
        const auto slots = window_slots(t, window);
        for (int k = 0; k < window; ++k) {
            const auto& s = slots[static_cast<std::size_t>(k)];
            const AngleSet& src = (s.refined && !refined.empty()) ? refined[static_cast<std::size_t>(s.index)]
                                                                   : hat[static_cast<std::size_t>(s.index)];
            w.block(t - window, static_cast<Eigen::Index>(k) * f, 1, f) = frame_row(src);
        }
    }
    return w;
}

}  // namespace

AngleSequence run_refined_sequence(const RefinerModel& model, const AngleSequence& hat) {
    const int window = model.window();
    AngleSequence out(hat.begin(), hat.end());
    std::vector<AngleSet> frames(static_cast<std::size_t>(window));
    for (int t = window; t < static_cast<int>(hat.size()); ++t) {
        const auto slots = window_slots(t, window);
        for (int k = 0; k < window; ++k) {
            const auto& s = slots[static_cast<std::size_t>(k)];
            frames[static_cast<std::size_t>(k)] = s.refined ? out[static_cast<std::size_t>(s.index)] : hat[static_cast<std::size_t>(s.index)];
        }
        out[static_cast<std::size_t>(t)] = refine(model, frames);
    }
    return out;
}

ad::Var refine_loss(ad::Graph& g, const RefinerModel& model, const Matrix& windows, const Matrix& truth) {
    ad::Var y = model.forward(g, windows);
    return g.angular_distortion(y, g.input(ad::Tensor::from_matrix(truth)));
}

void to_json(nlohmann::json& j, const RefinerTrainConfig& c) {
    j = {{"pretrain_epochs", c.pretrain_epochs}, {"recursive_epochs", c.recursive_epochs},
         {"pretrain_lr", c.pretrain_lr},         {"lr", c.lr},
         {"batch", c.batch},                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, RefinerTrainConfig& c) {
    RefinerTrainConfig d;
    c.pretrain_epochs = j.value("pretrain_epochs", d.pretrain_epochs);
    c.recursive_epochs = j.value("recursive_epochs", d.recursive_epochs);
    c.pretrain_lr = j.value("pretrain_lr", d.pretrain_lr);
    c.lr = j.value("lr", d.lr);
    c.batch = j.value("batch", d.batch);
    c.seed = j.value("seed", d.seed);
}

RefinerHistory train_refiner(RefinerModel& model, const std::vector<AngleSequence>& hat,
                             const std::vector<AngleSequence>& truth, const RefinerTrainConfig& cfg) {
    if (hat.size() != truth.size()) throw std::invalid_argument("train_refiner: hat and truth counts differ");
    if (cfg.batch < 1 || cfg.pretrain_epochs < 0 || cfg.recursive_epochs < 0)
        throw std::invalid_argument("train_refiner: bad batch or epoch count");
    const auto& geo = model.geometry();
    const int f = geo.frame_size();
    const int window = geo.window;
    std::mt19937_64 rng(cfg.seed);

    // Targets are fixed; windows are rebuilt every recursive epoch.
    std::vector<Matrix> targets;
    Eigen::Index total = 0;
    for (std::size_t s = 0; s < hat.size(); ++s) {
        if (hat[s].size() != truth[s].size()) throw std::invalid_argument("train_refiner: sequence length mismatch");
        AngleSequence tail(truth[s].begin() + std::min<std::ptrdiff_t>(window, static_cast<std::ptrdiff_t>(truth[s].size())),
                           truth[s].end());
        Matrix y(static_cast<Eigen::Index>(tail.size()), f);
        for (std::size_t i = 0; i < tail.size(); ++i) y.row(static_cast<Eigen::Index>(i)) = frame_row(tail[i]);
        total += y.rows();
        targets.push_back(std::move(y));
    }
    if (total == 0) throw std::invalid_argument("train_refiner: sequences are not longer than the window");
    Matrix y_all(total, f);
    {
        Eigen::Index r = 0;
        for (const auto& y : targets) {
            y_all.middleRows(r, y.rows()) = y;
            r += y.rows();
        }
    }

    auto build_windows = [&](bool recursive) {
        Matrix w(total, static_cast<Eigen::Index>(f) * window);
        Eigen::Index r = 0;
        for (const auto& seq : hat) {
            const Matrix sw = recursive ? sequence_windows(seq, run_refined_sequence(model, seq), window, f)
                                        : sequence_windows(seq, {}, window, f);
            w.middleRows(r, sw.rows()) = sw;
            r += sw.rows();
        }
        return w;
    };

    ad::AdamState adam;
    RefinerHistory h;
    std::vector<Eigen::Index> order(static_cast<std::size_t>(total));
    std::iota(order.begin(), order.end(), 0);
    auto epoch = [&](const Matrix& windows) {
        std::shuffle(order.begin(), order.end(), rng);
        double sum = 0;
        int steps = 0;
        for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(cfg.batch));
            Matrix xb(static_cast<Eigen::Index>(e - s), windows.cols());
            Matrix yb(static_cast<Eigen::Index>(e - s), f);
            for (std::size_t i = s; i < e; ++i) {
                xb.row(static_cast<Eigen::Index>(i - s)) = windows.row(order[i]);
                yb.row(static_cast<Eigen::Index>(i - s)) = y_all.row(order[i]);
            }
            model.params().zero_grad();
            ad::Graph g;
            ad::Var loss = refine_loss(g, model, xb, yb);
            const double lv = g.value(loss).item();
            if (!std::isfinite(lv)) throw std::runtime_error("refiner training diverged: non-finite loss");
            g.backward(loss);
            ad::adam_step(model.params(), adam);
            sum += lv;
            ++steps;
        }
        return sum / std::max(steps, 1);
    };

    adam.config.lr = cfg.pretrain_lr;
    const Matrix raw = build_windows(false);
    for (int e = 0; e < cfg.pretrain_epochs; ++e) {
        h.pretrain_loss.push_back(epoch(raw));
        if (cfg.on_epoch) cfg.on_epoch(e, false, h.pretrain_loss.back());
    }
    adam.config.lr = cfg.lr;
    for (int e = 0; e < cfg.recursive_epochs; ++e) {
        h.recursive_loss.push_back(epoch(build_windows(true)));
        if (cfg.on_epoch) cfg.on_epoch(e, true, h.recursive_loss.back());
    }
    return h;
}

}  // namespace csilab::refine
